//! Labeled time-series datasets in a flat CSV container: loading,
//! seeded splitting, entity grouping for the detector, and a synthetic
//! generator with segment-shaped anomalies.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::detection::SlidingWindowBuffer;
use crate::error::{Error, Result};
use crate::gon::HostGraph;
use crate::tensor::Tensor;

/// Rows are timesteps, columns are the `d` feature dimensions. Labels
/// (0/1 per row) are present on detection splits and absent on pure
/// training data.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<bool>>,
    pub dims: usize,
}

impl TimeSeriesDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Option<Vec<bool>>) -> Result<Self> {
        let dims = features.first().map_or(0, |r| r.len());
        let ds = TimeSeriesDataset { features, labels, dims };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.iter().filter(|&&b| b).count())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != self.dims {
                return Err(Error::contract(format!(
                    "row {} has {} features, expected {}",
                    i,
                    row.len(),
                    self.dims
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("row {i} has a non-finite feature")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.len() {
                return Err(Error::contract(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.features.len()
                )));
            }
        }
        Ok(())
    }
}

/// Parses `timestamp,<feature_0..d-1>[,label]`. Whether the last column
/// is a label is decided by the header name.
pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: header: {e}", path.display())))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("timestamp") {
        return Err(Error::data(format!(
            "{}: first column must be `timestamp`",
            path.display()
        )));
    }
    let has_label = headers.get(headers.len() - 1) == Some("label");
    let d = headers.len() - 1 - usize::from(has_label);
    if d == 0 {
        return Err(Error::data(format!("{}: no feature columns", path.display())));
    }

    let mut features = Vec::new();
    let mut labels = if has_label { Some(Vec::new()) } else { None };
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::data(format!("{}:{line}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::data(format!(
                "{}:{line}: {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(d);
        for col in 1..=d {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(format!(
                    "{}:{line}: column `{}`: not a number: `{cell}`",
                    path.display(),
                    headers.get(col).unwrap_or("?")
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}:{line}: column `{}`: non-finite value",
                    path.display(),
                    headers.get(col).unwrap_or("?")
                )));
            }
            row.push(v);
        }
        features.push(row);
        if let Some(labels) = &mut labels {
            let cell = record.get(d + 1).unwrap_or("");
            labels.push(match cell {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::data(format!(
                        "{}:{line}: column `label`: expected 0 or 1, got `{other}`",
                        path.display()
                    )))
                }
            });
        }
    }
    TimeSeriesDataset::new(features, labels)
}

/// Writes the same container `load_csv` reads; timestamps are the row
/// indices. Output is deterministic for identical datasets.
pub fn write_csv(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    out.push_str("timestamp");
    for j in 0..ds.dims {
        let _ = write!(out, ",f{j}");
    }
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in ds.features.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        if let Some(labels) = &ds.labels {
            let _ = write!(out, ",{}", u8::from(labels[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Seed-deterministic row split with exact sizes: train gets
/// `floor(len * ratio)` rows; both halves keep the original row order.
pub fn split_train_test<R: Rng>(
    ds: &TimeSeriesDataset,
    ratio: f64,
    rng: &mut R,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("split ratio must be in [0, 1], got {ratio}")));
    }
    let n = ds.len();
    let n_train = (n as f64 * ratio).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    // Fisher-Yates; the first n_train shuffled indices become the train set.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let train_set: BTreeSet<usize> = indices[..n_train].iter().copied().collect();
    let pick = |keep_train: bool| -> TimeSeriesDataset {
        let rows: Vec<Vec<f64>> = ds
            .features
            .iter()
            .enumerate()
            .filter(|(i, _)| train_set.contains(i) == keep_train)
            .map(|(_, r)| r.clone())
            .collect();
        let labels = ds.labels.as_ref().map(|l| {
            l.iter()
                .enumerate()
                .filter(|(i, _)| train_set.contains(i) == keep_train)
                .map(|(_, &b)| b)
                .collect()
        });
        TimeSeriesDataset { features: rows, labels, dims: ds.dims }
    };
    Ok((pick(true), pick(false)))
}

/// Streams dataset rows into detector inputs: `d` dimensions are grouped
/// into `ceil(d / n)` entities of `n` features (the last entity
/// zero-padded), windows replicate backwards until `k` rows arrived.
pub struct WindowAssembler {
    buf: SlidingWindowBuffer,
    entities: usize,
    n: usize,
    dims: usize,
}

impl WindowAssembler {
    pub fn new(dims: usize, n: usize, k: usize) -> Result<Self> {
        if dims == 0 || n == 0 {
            return Err(Error::contract("dims and features per entity must be >= 1"));
        }
        let entities = dims.div_ceil(n);
        Ok(WindowAssembler { buf: SlidingWindowBuffer::new(entities, n, k)?, entities, n, dims })
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dims {
            return Err(Error::shape(format!("{} dims", self.dims), format!("{}", row.len())));
        }
        let mut step = vec![0.0; self.entities * self.n];
        step[..row.len()].copy_from_slice(row);
        self.buf.push(step)
    }

    pub fn window(&self) -> Result<Tensor> {
        self.buf.window()
    }

    /// Hosts-only schedule context: each entity one-hot on its own slot.
    pub fn schedule(&self, m_max: usize) -> Result<Tensor> {
        if m_max < self.entities {
            return Err(Error::contract(format!(
                "schedule width {} below {} entities",
                m_max, self.entities
            )));
        }
        let mut data = vec![0.0; self.entities * m_max];
        for i in 0..self.entities {
            data[i * m_max + i] = 1.0;
        }
        Tensor::matrix(self.entities, m_max, data)
    }

    /// Star topology with entity 0 as the broker stand-in.
    pub fn graph(&self) -> Result<HostGraph> {
        let m = self.entities;
        let mut wb = vec![0.0; m * m];
        for i in 1..m {
            wb[i * m] = 1.0;
            wb[i] = 1.0;
        }
        HostGraph::new(Tensor::matrix(m, m, wb)?, Tensor::zeros(&[m, m]))
    }
}

/// Shape of a generated dataset: smooth per-dimension seasonal baselines
/// with additive noise, plus non-overlapping anomaly segments where a
/// random subset of dimensions spikes upward.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub dims: usize,
    /// Fraction of rows labeled anomalous; hit exactly up to rounding.
    pub anomaly_fraction: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Upward shift added to affected dimensions inside a segment.
    pub spike_min: f64,
    pub spike_max: f64,
    pub noise_sigma: f64,
    /// Fraction of dimensions affected by each segment.
    pub affected_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(rows: usize, dims: usize, anomaly_fraction: f64) -> Self {
        SyntheticSpec {
            rows,
            dims,
            anomaly_fraction,
            min_segment: 5,
            max_segment: 25,
            spike_min: 0.25,
            spike_max: 0.5,
            noise_sigma: 0.02,
            affected_fraction: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.dims == 0 {
            return Err(Error::contract("synthetic dataset needs rows and dims >= 1"));
        }
        if !(0.0..=0.9).contains(&self.anomaly_fraction) {
            return Err(Error::contract(format!(
                "anomaly fraction must be in [0, 0.9], got {}",
                self.anomaly_fraction
            )));
        }
        if self.min_segment == 0 || self.max_segment < self.min_segment {
            return Err(Error::contract("segment bounds must satisfy 1 <= min <= max"));
        }
        if !(self.spike_min > 0.0 && self.spike_max >= self.spike_min) {
            return Err(Error::contract("spike bounds must satisfy 0 < min <= max"));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.affected_fraction) {
            return Err(Error::contract("noise must be >= 0 and affected fraction in [0, 1]"));
        }
        Ok(())
    }
}

/// Deterministic for a given spec and rng state. The label count equals
/// `round(rows * anomaly_fraction)` exactly.
pub fn gen_synthetic<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let rows = spec.rows;
    let d = spec.dims;

    // Per-dimension seasonal baseline parameters.
    let mut mean = Vec::with_capacity(d);
    let mut amp = Vec::with_capacity(d);
    let mut period = Vec::with_capacity(d);
    let mut phase = Vec::with_capacity(d);
    for _ in 0..d {
        mean.push(rng.random_range(0.25..0.5));
        amp.push(rng.random_range(0.05..0.15));
        period.push(rng.random_range(40.0..160.0));
        phase.push(rng.random_range(0.0..std::f64::consts::TAU));
    }

    // Non-overlapping anomaly segments until the target count is hit.
    let target = (rows as f64 * spec.anomaly_fraction).round() as usize;
    let mut labels = vec![false; rows];
    let mut spikes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
    let affected = ((d as f64 * spec.affected_fraction).ceil() as usize).clamp(1, d);
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < target && attempts < 200 * rows.max(1) {
        attempts += 1;
        let want = rng
            .random_range(spec.min_segment..=spec.max_segment)
            .min(target - placed);
        if want == 0 {
            break;
        }
        let start = rng.random_range(0..rows);
        let end = (start + want).min(rows);
        if labels[start..end].iter().any(|&b| b) || start == end {
            continue;
        }
        // One dimension subset and spike profile per segment.
        let mut dims: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            let j = rng.random_range(0..=i);
            dims.swap(i, j);
        }
        let segment_spikes: Vec<(usize, f64)> = dims[..affected]
            .iter()
            .map(|&j| (j, rng.random_range(spec.spike_min..=spec.spike_max)))
            .collect();
        for t in start..end {
            labels[t] = true;
            spikes[t] = segment_spikes.clone();
        }
        placed += end - start;
    }
    if placed < target {
        return Err(Error::contract(format!(
            "could not place {target} anomalous rows in {rows} (rate too high for the segment shape)"
        )));
    }

    let mut features = Vec::with_capacity(rows);
    for t in 0..rows {
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let seasonal =
                mean[j] + amp[j] * (std::f64::consts::TAU * t as f64 / period[j] + phase[j]).sin();
            let noise = if spec.noise_sigma > 0.0 {
                // Box-Muller keeps the draw count fixed at one pair per cell.
                let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.random();
                spec.noise_sigma
                    * (-2.0 * u1.ln()).sqrt()
                    * (std::f64::consts::TAU * u2).cos()
            } else {
                0.0
            };
            row.push((seasonal + noise).clamp(0.0, 1.0));
        }
        for &(j, s) in &spikes[t] {
            row[j] = (row[j] + s).clamp(0.0, 1.0);
        }
        features.push(row);
    }
    TimeSeriesDataset::new(features, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dragon-dataset-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let ds = TimeSeriesDataset::new(
            vec![vec![0.25, 1.0], vec![0.5, 0.125], vec![0.75, 0.0625]],
            Some(vec![false, true, false]),
        )
        .unwrap();
        let path = tmp("roundtrip.csv");
        write_csv(&path, &ds).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn loader_reports_bad_cell_with_location() {
        let path = tmp("bad_cell.csv");
        std::fs::write(&path, "timestamp,f0,label\n0,0.5,0\n1,oops,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3"), "line number in {msg}");
        assert!(msg.contains("f0"), "column name in {msg}");
        assert!(msg.contains("oops"), "offending cell in {msg}");
    }

    #[test]
    fn loader_rejects_non_binary_label() {
        let path = tmp("bad_label.csv");
        std::fs::write(&path, "timestamp,f0,label\n0,0.5,2\n").unwrap();
        assert!(load_csv(&path).unwrap_err().to_string().contains("label"));
    }

    #[test]
    fn unlabeled_file_loads_without_labels() {
        let path = tmp("unlabeled.csv");
        std::fs::write(&path, "timestamp,f0,f1\n0,0.1,0.2\n1,0.3,0.4\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.dims, 2);
        assert!(ds.labels.is_none());
    }

    #[test]
    fn split_sizes_are_ratio_exact_and_seeded() {
        let ds = TimeSeriesDataset::new(
            (0..10).map(|i| vec![i as f64]).collect(),
            Some((0..10).map(|i| i % 3 == 0).collect()),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (train, test) = split_train_test(&ds, 0.8, &mut rng).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        // Order preserved inside each half.
        let vals: Vec<f64> = train.features.iter().map(|r| r[0]).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, sorted);

        let mut rng2 = ChaCha12Rng::seed_from_u64(8);
        let (train2, _) = split_train_test(&ds, 0.8, &mut rng2).unwrap();
        assert_eq!(train, train2, "same seed, same split");

        let mut rng3 = ChaCha12Rng::seed_from_u64(8);
        let (all, none) = split_train_test(&ds, 1.0, &mut rng3).unwrap();
        assert_eq!(all.len(), 10);
        assert!(none.is_empty(), "ratio 1.0 leaves an empty test half");
    }

    #[test]
    fn synthetic_hits_exact_label_count() {
        let spec = SyntheticSpec::new(5000, 1, 0.1288);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ds = gen_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(ds.len(), 5000);
        assert_eq!(ds.anomaly_count(), 644);
        assert!(ds.features.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let mut rng2 = ChaCha12Rng::seed_from_u64(3);
        let ds2 = gen_synthetic(&spec, &mut rng2).unwrap();
        assert_eq!(ds, ds2, "same seed regenerates the same file");
    }

    #[test]
    fn synthetic_zero_fraction_is_clean() {
        let spec = SyntheticSpec::new(200, 4, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let ds = gen_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(ds.anomaly_count(), 0);
    }

    #[test]
    fn synthetic_segments_lift_affected_dims() {
        let spec = SyntheticSpec { noise_sigma: 0.0, ..SyntheticSpec::new(400, 8, 0.15) };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ds = gen_synthetic(&spec, &mut rng).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let mean_of = |rows: Vec<&Vec<f64>>| -> f64 {
            let total: f64 = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
            total / (rows.len() * ds.dims) as f64
        };
        let normal =
            mean_of(ds.features.iter().zip(labels).filter(|(_, &l)| !l).map(|(r, _)| r).collect());
        let anomalous =
            mean_of(ds.features.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).collect());
        assert!(
            anomalous > normal + 0.05,
            "spikes lift anomalous rows: {anomalous:.3} vs {normal:.3}"
        );
    }

    #[test]
    fn assembler_groups_and_pads_dims() {
        let mut wa = WindowAssembler::new(5, 2, 3).unwrap();
        assert_eq!(wa.entities(), 3);
        wa.push(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let w = wa.window().unwrap();
        assert_eq!(w.shape(), [3, 6]);
        // Entity 2 holds dim 4 and a zero pad, replicated across time.
        assert_eq!(w.row(2), &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
        let s = wa.schedule(4).unwrap();
        assert_eq!(s.shape(), [3, 4]);
        assert_eq!(s.row(2), &[0.0, 0.0, 1.0, 0.0]);
        assert!(wa.schedule(2).is_err(), "width below entity count");
        let g = wa.graph().unwrap();
        assert_eq!(g.n_hosts, 3);
    }
}
