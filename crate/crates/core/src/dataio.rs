//! Dataset ingestion (IDX, numeric CSV), synthetic mixture generation, and
//! task-stream construction for lifelong runs.
//!
//! Labels ride in a separate [`EvalHandle`]; the training-facing
//! [`TaskData`] carries no label accessor at all, so no training path can
//! touch them.

use crate::numerics::SymMatrix;
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Evaluation-only labels. Constructed by this module and handed to
/// evaluators; training code never sees one.
#[derive(Debug, Clone)]
pub struct EvalHandle {
    labels: Vec<usize>,
}

impl EvalHandle {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Observation matrix with optional evaluation-only labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub provenance: String,
    eval: Option<EvalHandle>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Option<Vec<usize>>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != x.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    x.nrows()
                )));
            }
        }
        Ok(Self { x, provenance: provenance.into(), eval: labels.map(|l| EvalHandle { labels: l }) })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn eval_handle(&self) -> Option<&EvalHandle> {
        self.eval.as_ref()
    }

    /// Splits into the training-facing matrix (one stream, fixed-size
    /// mini-batches) and the evaluation handle.
    pub fn into_single_task(self, minibatch_size: usize) -> (TaskData, Option<EvalHandle>) {
        let n = self.x.nrows();
        let indices: Vec<usize> = (0..n).collect();
        let minibatches = chunk_indices(&indices, minibatch_size.max(1));
        let task = TaskData {
            x: self.x,
            streams: vec![StreamSpec { minibatches }],
            provenance: self.provenance,
        };
        (task, self.eval)
    }
}

/// Row indices of each mini-batch of one stream.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub minibatches: Vec<Vec<usize>>,
}

impl StreamSpec {
    pub fn rows(&self) -> Vec<usize> {
        self.minibatches.iter().flatten().copied().collect()
    }
}

/// Training-facing view of one task: observations and the stream/mini-batch
/// partition. No labels.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub x: Array2<f64>,
    pub streams: Vec<StreamSpec>,
    pub provenance: String,
}

/// One task plus its held-out evaluation labels.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: TaskData,
    pub eval: EvalHandle,
}

/// Ordered tasks, each split into streams and mini-batches.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

fn chunk_indices(indices: &[usize], chunk: usize) -> Vec<Vec<usize>> {
    if indices.is_empty() {
        return vec![Vec::new()];
    }
    indices.chunks(chunk).map(|c| c.to_vec()).collect()
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse {
            location: format!("{} offset {offset}", path.display()),
            message: "file truncated".into(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Reads a big-endian IDX image/label pair: image magic 0x00000803, label
/// magic 0x00000801. Pixels scale to [0,1]; images flatten row-major to
/// d = rows·cols.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse {
            location: format!("{} offset 0", images_path.display()),
            message: format!("bad image magic 0x{magic:08x}, expected 0x00000803"),
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let d = rows * cols;
    let expected = 16 + n * d;
    if img_bytes.len() < expected {
        return Err(Error::Parse {
            location: format!("{} offset {}", images_path.display(), img_bytes.len()),
            message: format!("expected {expected} bytes for {n} {rows}x{cols} images"),
        });
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let magic = read_be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            location: format!("{} offset 0", labels_path.display()),
            message: format!("bad label magic 0x{magic:08x}, expected 0x00000801"),
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::Parse {
            location: format!("{} offset 4", labels_path.display()),
            message: format!("label count {n_labels} does not match image count {n}"),
        });
    }
    if lbl_bytes.len() < 8 + n {
        return Err(Error::Parse {
            location: format!("{} offset {}", labels_path.display(), lbl_bytes.len()),
            message: format!("expected {} bytes for {n} labels", 8 + n),
        });
    }

    let x = Array2::from_shape_fn((n, d), |(i, j)| img_bytes[16 + i * d + j] as f64 / 255.0);
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    Dataset::new(
        x,
        Some(labels),
        format!("idx:{}", images_path.display()),
    )
}

/// Reads a rectangular numeric CSV; with `has_labels` the final column is an
/// integer label split into the evaluation handle.
pub fn read_csv(path: &Path, has_labels: bool) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                location: format!("{} line {}", path.display(), line_no + 1),
                message: format!("non-numeric cell `{}`", cell.trim()),
            })?;
            values.push(v);
        }
        if let Some(w) = width {
            if values.len() != w {
                return Err(Error::Parse {
                    location: format!("{} line {}", path.display(), line_no + 1),
                    message: format!("ragged row: {} cells, expected {w}", values.len()),
                });
            }
        } else {
            if has_labels && values.len() < 2 {
                return Err(Error::Parse {
                    location: format!("{} line {}", path.display(), line_no + 1),
                    message: "need at least one feature column besides the label".into(),
                });
            }
            width = Some(values.len());
        }
        if has_labels {
            let raw = values.pop().unwrap();
            if raw.fract() != 0.0 || raw < 0.0 {
                return Err(Error::Parse {
                    location: format!("{} line {}", path.display(), line_no + 1),
                    message: format!("label column must hold non-negative integers, got {raw}"),
                });
            }
            labels.push(raw as usize);
        }
        rows.push(values);
    }
    let n = rows.len();
    let d = width.map(|w| if has_labels { w - 1 } else { w }).unwrap_or(0);
    let mut x = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    Dataset::new(
        x,
        if has_labels { Some(labels) } else { None },
        format!("csv:{}", path.display()),
    )
}

/// Writes a dataset as numeric CSV, optionally with a trailing label column.
pub fn write_csv(path: &Path, x: ArrayView2<f64>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != x.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", l.len(), x.nrows())));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut first = true;
        for v in row {
            if !first {
                write!(out, ",")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
        if let Some(l) = labels {
            write!(out, ",{}", l[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Labeled samples from a Gaussian mixture, deterministic per seed.
pub fn synth_gmm(
    means: &[Vec<f64>],
    covariances: &[SymMatrix],
    weights: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if means.is_empty() || means.len() != covariances.len() || means.len() != weights.len() {
        return Err(Error::Contract(format!(
            "component counts disagree: {} means, {} covariances, {} weights",
            means.len(),
            covariances.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Contract(format!("weights must be a distribution, sum {total}")));
    }
    let d = means[0].len();
    let mut factors = Vec::with_capacity(covariances.len());
    for (k, cov) in covariances.iter().enumerate() {
        if cov.dim() != d || means[k].len() != d {
            return Err(Error::Shape(format!("component {k} dimension mismatch")));
        }
        factors.push(crate::numerics::cholesky_logdet_inverse(cov)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                k = j;
                break;
            }
            k = j;
        }
        let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lower = &factors[k].lower;
        for r in 0..d {
            let mut v = means[k][r];
            for c in 0..=r {
                v += lower[r * d + c] * eps[c];
            }
            x[[i, r]] = v;
        }
        labels.push(k);
    }
    Dataset::new(x, Some(labels), format!("synth:seed={seed}"))
}

/// Splits a labeled dataset into ordered tasks by label groups; each task is
/// shuffled (seeded), optionally capped, then sliced into streams and
/// mini-batches.
pub fn build_split_tasks(
    ds: &Dataset,
    class_groups: &[Vec<usize>],
    streams_per_task: usize,
    minibatches_per_stream: usize,
    subsample_cap: Option<usize>,
    seed: u64,
) -> Result<TaskStream> {
    let eval = ds
        .eval_handle()
        .ok_or_else(|| Error::Contract("split tasks need labels".into()))?;
    if streams_per_task == 0 || minibatches_per_stream == 0 {
        return Err(Error::Contract("stream and mini-batch counts must be positive".into()));
    }
    for (i, a) in class_groups.iter().enumerate() {
        for b in class_groups.iter().skip(i + 1) {
            if a.iter().any(|l| b.contains(l)) {
                return Err(Error::Contract("class groups must be disjoint".into()));
            }
        }
    }
    let labels = eval.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(class_groups.len());
    for group in class_groups {
        let mut indices: Vec<usize> = (0..ds.n())
            .filter(|&i| group.contains(&labels[i]))
            .collect();
        if indices.is_empty() {
            return Err(Error::Contract(format!("no samples for class group {group:?}")));
        }
        indices.shuffle(&mut rng);
        if let Some(cap) = subsample_cap {
            indices.truncate(cap);
        }
        let m = indices.len();
        let mut x = Array2::zeros((m, ds.dim()));
        let mut task_labels = Vec::with_capacity(m);
        for (row, &src) in indices.iter().enumerate() {
            x.row_mut(row).assign(&ds.x.row(src));
            task_labels.push(labels[src]);
        }
        // Slice into streams, then mini-batches, preserving order.
        let rows: Vec<usize> = (0..m).collect();
        let streams_n = streams_per_task.min(m);
        let stream_size = m.div_ceil(streams_n);
        let streams: Vec<StreamSpec> = rows
            .chunks(stream_size)
            .map(|stream_rows| {
                let mb = stream_rows.len().div_ceil(minibatches_per_stream);
                StreamSpec { minibatches: chunk_indices(stream_rows, mb.max(1)) }
            })
            .collect();
        tasks.push(Task {
            train: TaskData { x, streams, provenance: format!("{} group {group:?}", ds.provenance) },
            eval: EvalHandle { labels: task_labels },
        });
    }
    Ok(TaskStream { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Two 2x2 images with known bytes.
        let img_path = dir.join("imgs.idx3");
        let lbl_path = dir.join("lbls.idx1");
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 255, 10, 20, 30, 40]);
        std::fs::write(&img_path, img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        std::fs::write(&lbl_path, lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_reader_round_trips_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_fixture(dir.path());
        let ds = read_idx(&img, &lbl).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dim(), 4);
        let expect = [0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((ds.x[[0, j]] - e).abs() < 1e-15);
        }
        assert_eq!(ds.eval_handle().unwrap().labels(), &[7, 3]);
    }

    #[test]
    fn idx_reader_rejects_bad_magic_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, bytes).unwrap();
        match read_idx(&img, &lbl) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with("offset 0")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_reader_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_fixture(dir.path());
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_idx(&img, &lbl), Err(Error::Parse { .. })));

        let (img, lbl) = write_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&lbl).unwrap();
        bytes[7] = 9;
        std::fs::write(&lbl, bytes).unwrap();
        assert!(matches!(read_idx(&img, &lbl), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_reader_fixture_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "1.5,2.0\n-3.25,4\n0,1e-3\n").unwrap();
        let ds = read_csv(&path, false).unwrap();
        assert_eq!(ds.x, array![[1.5, 2.0], [-3.25, 4.0], [0.0, 1e-3]]);
        assert!(ds.eval_handle().is_none());

        std::fs::write(&path, "1.5,2.0,1\n-3.25,4,0\n").unwrap();
        let ds = read_csv(&path, true).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.eval_handle().unwrap().labels(), &[1, 0]);
    }

    #[test]
    fn csv_reader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,2\n3,abc\n").unwrap();
        match read_csv(&path, false) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with("line 2")),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "1,2\n3\n").unwrap();
        match read_csv(&path, false) {
            Err(Error::Parse { location, message }) => {
                assert!(location.ends_with("line 2"));
                assert!(message.contains("ragged"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = Array2::from_shape_fn((500, 40), |_| {
            // tf-idf-shaped: sparse non-negative values.
            if rng.random_bool(0.8) {
                0.0
            } else {
                rng.random_range(0.0..5.0)
            }
        });
        let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        write_csv(&path, x.view(), Some(&labels)).unwrap();
        let ds = read_csv(&path, true).unwrap();
        assert_eq!(ds.x.dim(), (500, 40));
        for (a, b) in ds.x.iter().zip(x.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(ds.eval_handle().unwrap().labels(), &labels[..]);
    }

    #[test]
    fn synth_gmm_statistics_and_determinism() {
        let means = vec![vec![0.0, 0.0]];
        let covs = vec![SymMatrix::identity(2)];
        let ds = synth_gmm(&means, &covs, &[1.0], 10_000, 7).unwrap();
        for j in 0..2 {
            let mean: f64 = ds.x.column(j).sum() / 10_000.0;
            assert!(mean.abs() < 3.0 / (10_000f64).sqrt(), "mean {mean}");
        }

        // weights (1, 0): all labels 0.
        let means = vec![vec![0.0], vec![5.0]];
        let covs = vec![SymMatrix::identity(1), SymMatrix::identity(1)];
        let ds = synth_gmm(&means, &covs, &[1.0, 0.0], 100, 3).unwrap();
        assert!(ds.eval_handle().unwrap().labels().iter().all(|&l| l == 0));

        let a = synth_gmm(&means, &covs, &[0.5, 0.5], 50, 11).unwrap();
        let b = synth_gmm(&means, &covs, &[0.5, 0.5], 50, 11).unwrap();
        assert_eq!(a.x, b.x);
        assert!(synth_gmm(&means, &covs, &[0.9, 0.3], 10, 0).is_err());
    }

    #[test]
    fn split_tasks_partition_property() {
        let means = vec![vec![0.0], vec![5.0], vec![10.0], vec![15.0]];
        let covs = vec![SymMatrix::identity(1); 4];
        let ds = synth_gmm(&means, &covs, &[0.25; 4], 400, 9).unwrap();
        let stream = build_split_tasks(&ds, &[vec![0, 1], vec![2, 3]], 3, 2, None, 1).unwrap();
        assert_eq!(stream.tasks.len(), 2);
        let labels = ds.eval_handle().unwrap().labels();
        for (g, task) in stream.tasks.iter().enumerate() {
            let expect_count = labels
                .iter()
                .filter(|&&l| l == 2 * g || l == 2 * g + 1)
                .count();
            assert_eq!(task.train.x.nrows(), expect_count);
            assert_eq!(task.eval.len(), expect_count);
            // Concatenating all mini-batches reproduces every row exactly once.
            let mut seen: Vec<usize> = task
                .train
                .streams
                .iter()
                .flat_map(|s| s.rows())
                .collect();
            seen.sort_unstable();
            let expect: Vec<usize> = (0..expect_count).collect();
            assert_eq!(seen, expect);
            // Labels stay aligned with rows.
            for (row, &l) in task.eval.labels().iter().enumerate() {
                assert!(l == 2 * g || l == 2 * g + 1);
                let _ = row;
            }
        }
    }

    #[test]
    fn split_tasks_single_group_and_cap() {
        let means = vec![vec![0.0], vec![5.0]];
        let covs = vec![SymMatrix::identity(1); 2];
        let ds = synth_gmm(&means, &covs, &[0.5, 0.5], 100, 9).unwrap();
        let stream = build_split_tasks(&ds, &[vec![0, 1]], 1, 2, None, 1).unwrap();
        assert_eq!(stream.tasks.len(), 1);
        assert_eq!(stream.tasks[0].train.x.nrows(), 100);

        let capped = build_split_tasks(&ds, &[vec![0, 1]], 1, 2, Some(10), 1).unwrap();
        assert_eq!(capped.tasks[0].train.x.nrows(), 10);

        assert!(build_split_tasks(&ds, &[vec![7]], 1, 2, None, 1).is_err());
        assert!(build_split_tasks(&ds, &[vec![0], vec![0]], 1, 2, None, 1).is_err());
    }
}
