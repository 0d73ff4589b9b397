//! Desk-scale classification data: synthetic generators, CSV ingestion,
//! stratified splits and N-way k-shot episodes.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix2D;
use crate::rng::{stream, Stream};

/// Feature rows with integer labels in `0..n_classes`.
///
/// `ids` are the stable indices of the rows in the dataset they were first
/// generated or loaded as. Fresh datasets carry `0..n`; subsets produced by
/// [`split`] and [`make_episode`] keep the ids of their source rows so that
/// disjointness can be checked across subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix2D,
    labels: Vec<usize>,
    n_classes: usize,
    ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix2D, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(features, labels, n_classes, ids)
    }

    pub fn with_ids(features: Matrix2D, labels: Vec<usize>, n_classes: usize, ids: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::shape(
                "Dataset",
                format!("{} rows", features.rows()),
                format!("{} labels, {} ids", labels.len(), ids.len()),
            ));
        }
        let mut counts = vec![0usize; n_classes];
        for (row, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::Parse {
                    row,
                    msg: format!("label {y} not below class count {n_classes}"),
                });
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Contract(format!("class {c} has no examples")));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0]));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Matrix2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn one_hot(&self) -> Matrix2D {
        let mut m = Matrix2D::zeros(self.len(), self.n_classes);
        for (r, &y) in self.labels.iter().enumerate() {
            m[(r, y)] = 1.0;
        }
        m
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at the given positions, ids preserved. Every class must survive.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::with_ids(
            self.features.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.n_classes,
            rows.iter().map(|&r| self.ids[r]).collect(),
        )
    }

    fn rows_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.labels[r] == class).collect()
    }

    /// Same rows with the features replaced, e.g. after standardization.
    pub fn with_features(&self, features: Matrix2D) -> Result<Dataset> {
        if features.rows() != self.len() {
            return Err(Error::shape("Dataset::with_features", self.len(), features.rows()));
        }
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }
}

/// Per-dimension affine map to zero mean and unit variance, fitted on one
/// dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Standardizer {
        let (n, d) = data.features.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(data.features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((v, x), m) in var.iter_mut().zip(data.features.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        // Constant columns are only centred.
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn identity(dim: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.dim() {
            return Err(Error::shape("Standardizer::apply", self.dim(), data.dim()));
        }
        let mut f = data.features.clone();
        for r in 0..f.rows() {
            for ((x, m), s) in f.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
        data.with_features(f)
    }
}

/// Isotropic Gaussian clusters, `per_class` points each.
///
/// Class means are drawn uniformly from a box and rejected until every pair
/// is at least `4·spread` apart.
pub fn gen_blobs(n_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || per_class < 1 || dim < 1 {
        return Err(Error::Config(format!(
            "blobs need n_classes >= 2, per_class >= 1, dim >= 1 (got {n_classes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "blob spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = stream(seed, Stream::Data);
    let means = blob_means(n_classes, dim, spread, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n_classes * per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(m.iter().map(|&mu| mu + spread * noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Matrix2D::from_vec(labels.len(), dim, data)?, labels, n_classes)
}

fn blob_means<R: Rng>(n_classes: usize, dim: usize, spread: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let min_dist = (4.0 * spread).max(1e-6);
    let mut half_width = 2.5 * spread.max(0.25) * n_classes as f64;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut failures = 0;
    while means.len() < n_classes {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect();
        let far = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_dist
        });
        if far {
            means.push(cand);
        } else {
            failures += 1;
            if failures % 100 == 0 {
                half_width *= 1.5;
            }
        }
    }
    means
}

/// Two interleaving unit half circles in the plane, one per class.
pub fn gen_moons(per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if per_class < 1 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "moons need per_class >= 1 and finite noise >= 0 (got {per_class}, {noise})"
        )));
    }
    let mut rng = stream(seed, Stream::Data);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        for k in 0..per_class {
            let t = if per_class == 1 {
                0.0
            } else {
                std::f64::consts::PI * k as f64 / (per_class - 1) as f64
            };
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            rows.push([x + noise * gauss.sample(&mut rng), y + noise * gauss.sample(&mut rng)]);
            labels.push(class);
        }
    }
    Dataset::new(Matrix2D::from_rows(&rows)?, labels, 2)
}

const CLASS_DECL: &str = "# n_classes=";

/// Reads `f0,...,f{d-1},label` rows.
///
/// A leading `id` column, when present, supplies the ids; otherwise they are
/// `0..n`. An optional first line `# n_classes=C` declares the class count;
/// otherwise it is one more than the largest label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (declared, body) = match text.strip_prefix(CLASS_DECL) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let c = line.trim().parse::<usize>().map_err(|e| Error::Parse {
                row: 0,
                msg: format!("bad class declaration: {e}"),
            })?;
            (Some(c), body)
        }
        None => (None, text.as_str()),
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            msg: e.to_string(),
        })?
        .clone();
    let lead = usize::from(header.get(0) == Some("id"));
    if header.len() < 2 + lead || header.get(header.len() - 1) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            msg: "header must be [id,]f0,...,f{d-1},label".into(),
        });
    }
    let dim = header.len() - 1 - lead;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        if lead == 1 {
            let cell = &record[0];
            ids.push(cell.trim().parse::<usize>().map_err(|_| Error::Parse {
                row,
                msg: format!("id {cell:?} is not a non-negative integer"),
            })?);
        }
        for cell in record.iter().skip(lead).take(dim) {
            let v = cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("non-numeric feature {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    msg: format!("non-finite feature {cell:?}"),
                });
            }
            data.push(v);
        }
        let cell = &record[lead + dim];
        let y = cell.trim().parse::<usize>().map_err(|_| Error::Parse {
            row,
            msg: format!("label {cell:?} is not a class index"),
        })?;
        if let Some(c) = declared {
            if y >= c {
                return Err(Error::Parse {
                    row,
                    msg: format!("label {y} not below declared class count {c}"),
                });
            }
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = declared.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
    if lead == 0 {
        ids = (0..labels.len()).collect();
    }
    Dataset::with_ids(Matrix2D::from_vec(labels.len(), dim, data)?, labels, n_classes, ids)
}

/// Writes the format read by [`load_csv`], including the class declaration.
/// Floats use Rust's shortest round-trip representation.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{CLASS_DECL}{}", data.n_classes).map_err(io)?;
    let with_ids = data.ids.iter().enumerate().any(|(r, &id)| r != id);
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("f{k}")).collect();
    if with_ids {
        header.insert(0, "id".into());
    }
    writeln!(out, "{},label", header.join(",")).map_err(io)?;
    for r in 0..data.len() {
        let mut cells: Vec<String> = data.features.row(r).iter().map(|v| v.to_string()).collect();
        if with_ids {
            cells.insert(0, data.ids[r].to_string());
        }
        writeln!(out, "{},{}", cells.join(","), data.labels[r]).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Stratified train/validation split.
///
/// The validation size is `round(val_fraction·n)`, spread over classes by
/// largest remainder, with at least one validation and one training example
/// per class. Both halves keep source order and source ids.
pub fn split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Range {
            what: "val_fraction",
            detail: format!("{val_fraction} not in (0, 1)"),
        });
    }
    let counts = data.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &k)| k < 2) {
        return Err(Error::Stratification { class, count });
    }
    let total = (val_fraction * data.len() as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&k| val_fraction * k as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if assigned >= total {
            break;
        }
        if quota[c] + 1 < counts[c] && (quota[c] as f64) < exact[c].ceil() {
            quota[c] += 1;
            assigned += 1;
        }
    }
    for (q, &k) in quota.iter_mut().zip(&counts) {
        *q = (*q).clamp(1, k - 1);
    }

    let mut rng = stream(seed, Stream::Data);
    let mut is_val = vec![false; data.len()];
    for (class, &q) in quota.iter().enumerate() {
        let mut rows = data.rows_of_class(class);
        rows.shuffle(&mut rng);
        for &r in &rows[..q] {
            is_val[r] = true;
        }
    }
    let train_rows: Vec<usize> = (0..data.len()).filter(|&r| !is_val[r]).collect();
    let val_rows: Vec<usize> = (0..data.len()).filter(|&r| is_val[r]).collect();
    Ok((data.subset(&train_rows)?, data.subset(&val_rows)?))
}

/// One N-way k-shot task. Labels inside `support` and `query` are remapped to
/// `0..n_way`; `classes[new]` is the original label.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Dataset,
    pub query: Dataset,
    pub classes: Vec<usize>,
}

pub fn make_episode(data: &Dataset, n_way: usize, k_shot: usize, q_query: usize, seed: u64) -> Result<Episode> {
    if n_way < 1 || k_shot < 1 || q_query < 1 {
        return Err(Error::Episode(format!(
            "n_way, k_shot and q_query must be positive (got {n_way}, {k_shot}, {q_query})"
        )));
    }
    let counts = data.class_counts();
    let eligible: Vec<usize> = (0..data.n_classes())
        .filter(|&c| counts[c] >= k_shot + q_query)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Episode(format!(
            "{n_way}-way needs {n_way} classes with >= {} examples, dataset has {}",
            k_shot + q_query,
            eligible.len()
        )));
    }
    let mut rng = stream(seed, Stream::Episode);
    let mut classes: Vec<usize> = eligible.choose_multiple(&mut rng, n_way).copied().collect();
    classes.sort_unstable();

    let (mut s_rows, mut q_rows) = (Vec::new(), Vec::new());
    let (mut s_labels, mut q_labels) = (Vec::new(), Vec::new());
    for (new, &class) in classes.iter().enumerate() {
        let mut rows = data.rows_of_class(class);
        rows.shuffle(&mut rng);
        s_rows.extend_from_slice(&rows[..k_shot]);
        q_rows.extend_from_slice(&rows[k_shot..k_shot + q_query]);
        s_labels.extend(std::iter::repeat_n(new, k_shot));
        q_labels.extend(std::iter::repeat_n(new, q_query));
    }
    let pick = |rows: &[usize], labels: Vec<usize>| {
        Dataset::with_ids(
            data.features.select_rows(rows),
            labels,
            n_way,
            rows.iter().map(|&r| data.ids[r]).collect(),
        )
    };
    Ok(Episode {
        support: pick(&s_rows, s_labels)?,
        query: pick(&q_rows, q_labels)?,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blobs_are_balanced() {
        let d = gen_blobs(3, 40, 2, 0.3, 1).unwrap();
        assert_eq!(d.len(), 120);
        assert_eq!(d.class_counts(), vec![40, 40, 40]);
        assert_eq!(d.ids(), (0..120).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let d = gen_blobs(4, 5, 3, 0.0, 2).unwrap();
        for c in 0..4 {
            let rows: Vec<_> = (0..d.len()).filter(|&r| d.labels()[r] == c).collect();
            for &r in &rows {
                assert_eq!(d.features().row(r), d.features().row(rows[0]));
            }
        }
    }

    #[test]
    fn blob_means_are_separated() {
        for (classes, dim, spread) in [(3, 2, 0.3), (10, 2, 1.0), (8, 1, 0.5), (5, 6, 2.0)] {
            let means = blob_means(classes, dim, spread, &mut stream(7, Stream::Data));
            for i in 0..classes {
                for j in i + 1..classes {
                    let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(d.sqrt() >= 4.0 * spread);
                }
            }
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(
            gen_blobs(3, 10, 4, 0.3, 5).unwrap(),
            gen_blobs(3, 10, 4, 0.3, 5).unwrap()
        );
        assert_ne!(
            gen_blobs(3, 10, 4, 0.3, 5).unwrap(),
            gen_blobs(3, 10, 4, 0.3, 6).unwrap()
        );
        assert_eq!(gen_moons(20, 0.1, 5).unwrap(), gen_moons(20, 0.1, 5).unwrap());
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = gen_moons(50, 0.0, 1).unwrap();
        assert_eq!(d.len(), 100);
        for r in 0..d.len() {
            let [x, y] = [d.features()[(r, 0)], d.features()[(r, 1)]];
            let (cx, cy) = if d.labels()[r] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let radius = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            assert!((radius - 1.0).abs() < 1e-12);
            if d.labels()[r] == 0 {
                assert!(y >= -1e-12);
            } else {
                assert!(y <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn csv_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "f0,f1,label\n0.5,1,0\n-2,3e-1,1\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!((d.len(), d.n_classes(), d.dim()), (2, 2, 2));
        assert_eq!(d.features().row(1), &[-2.0, 0.3]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        assert!(matches!(
            load_csv(dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
        std::fs::write(&p, "f0,label\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::EmptyDataset)));
        std::fs::write(&p, "f0,label\n1,0\nabc,1\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { row: 2, .. })));
        std::fs::write(&p, "id,f0,label\n3,1,0\n3,2,1\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::DuplicateId(3))));
        std::fs::write(&p, "id,f0,label\n-1,1,0\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { row: 1, .. })));
        std::fs::write(&p, "# n_classes=2\nf0,label\n1,0\n2,1\n3,2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.csv");
        let d = gen_blobs(3, 7, 3, 0.4, 9).unwrap();
        save_csv(&d, &p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("f0,"));
        assert_eq!(load_csv(&p).unwrap(), d);
        let (tr, _) = split(&d, 0.3, 2).unwrap();
        save_csv(&tr, &p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("id,f0,"));
        assert_eq!(load_csv(&p).unwrap(), tr);
    }

    #[test]
    fn split_sizes() {
        let d = gen_blobs(3, 40, 2, 0.3, 1).unwrap();
        let (tr, va) = split(&d, 1.0 / 12.0, 4).unwrap();
        assert_eq!((tr.len(), va.len()), (110, 10));
        for (c, k) in va.class_counts().into_iter().enumerate() {
            let exact = 40.0 / 12.0;
            assert!((k as f64 - exact).abs() <= 1.0, "class {c}: {k}");
        }
        assert_eq!(split(&d, 1.0 / 12.0, 4).unwrap(), (tr, va));
    }

    #[test]
    fn split_rejects_singletons() {
        let d = Dataset::new(Matrix2D::zeros(3, 1), vec![0, 0, 1], 2).unwrap();
        assert!(matches!(
            split(&d, 0.5, 1),
            Err(Error::Stratification { class: 1, count: 1 })
        ));
        assert!(split(&d, 0.0, 1).is_err());
    }

    #[test]
    fn episode_shapes() {
        let d = gen_blobs(10, 8, 4, 0.3, 1).unwrap();
        let e = make_episode(&d, 5, 1, 3, 11).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 15));
        assert_eq!(e.support.class_counts(), vec![1; 5]);
        assert_eq!(e.query.class_counts(), vec![3; 5]);
        for (r, &id) in e.support.ids().iter().enumerate() {
            assert_eq!(e.classes[e.support.labels()[r]], d.labels()[id]);
        }
        assert_eq!(make_episode(&d, 5, 1, 3, 11).unwrap(), e);
        assert!(matches!(make_episode(&d, 11, 1, 3, 11), Err(Error::Episode(_))));
        assert!(make_episode(&d, 5, 4, 5, 11).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(per_class in 2usize..30, classes in 2usize..5, frac in 0.05f64..0.6, seed in 0u64..50) {
            let d = gen_blobs(classes, per_class, 2, 0.3, seed).unwrap();
            let (tr, va) = split(&d, frac, seed).unwrap();
            let mut ids: Vec<usize> = tr.ids().iter().chain(va.ids()).copied().collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..d.len()).collect::<Vec<_>>());
            for (c, k) in va.class_counts().into_iter().enumerate() {
                let exact = frac * d.class_counts()[c] as f64;
                prop_assert!(k >= 1 && k < d.class_counts()[c]);
                prop_assert!((k as f64 - exact).abs() <= 1.0 + 1e-9, "class {} got {} for {}", c, k, exact);
            }
        }

        #[test]
        fn episodes_are_disjoint(seed in 0u64..200, k in 1usize..3, q in 1usize..4) {
            let d = gen_blobs(10, 6, 2, 0.3, 3).unwrap();
            let e = make_episode(&d, 5, k, q, seed).unwrap();
            for id in e.support.ids() {
                prop_assert!(!e.query.ids().contains(id));
            }
            let mut cls = e.classes.clone();
            cls.dedup();
            prop_assert_eq!(cls.len(), 5);
        }
    }
}
