//! Basic-feature datasets: a synthetic generator with shared "action"
//! directions and class-specific mixtures, plus CSV and binary storage.

use std::fs;
use std::path::Path;

use crate::error::{contract, FdrlError, Result};
use crate::numerics::{DenseMatrix, SeededRng};

pub const DEFAULT_CLASS_NAMES: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];

pub const BIN_MAGIC: [u8; 4] = *b"FDRL";
pub const BIN_VERSION: u32 = 1;

pub fn default_class_names(k: usize) -> Vec<String> {
    if k == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class_{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    /// `N × P`
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl FeatureDataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return contract(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return contract(format!("label {bad} out of range for {k} classes"));
        }
        Ok(Self {
            features,
            labels,
            class_names,
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
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order, as an `n × P` matrix plus labels.
    pub fn gather(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let p = self.dim();
        let mut x = DenseMatrix::zeros(indices.len(), p);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (x, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.gather(indices);
        Self {
            features,
            labels,
            class_names: self.class_names.clone(),
        }
    }

    /// First `per_class` samples of every class go to the first set, the rest
    /// to the second. Order within each set is preserved.
    pub fn split_per_class(&self, per_class: usize) -> (Self, Self) {
        let mut seen = vec![0usize; self.n_classes()];
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < per_class {
                head.push(i);
            } else {
                tail.push(i);
            }
            seen[l] += 1;
        }
        (self.subset(&head), self.subset(&tail))
    }
}

/// Layout of the synthetic feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `n_actions × P`, unit rows.
    pub action_dirs: DenseMatrix,
    /// `K × n_actions`, non-negative, pairwise distinct rows.
    pub class_profiles: DenseMatrix,
    pub noise_sigma: f64,
    /// Per-sample multiplicative jitter: each action weight is scaled by `1 + u`,
    /// `u ~ U[−jitter, jitter]`.
    pub jitter: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
}

/// Knobs for [`SynthSpec::random`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_classes: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub jitter: f64,
    /// Actions that dominate each class profile.
    pub active_actions: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_classes: 7,
            n_actions: 9,
            dim: 512,
            samples_per_class: 400,
            noise_sigma: 0.1,
            jitter: 0.3,
            active_actions: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Random layout: each action direction is a non-negative unit vector on a
    /// random eighth of the coordinates; each class weights every action by
    /// `U[0, 0.3]` and a distinct set of `active_actions` of them by `U[0.7, 1.3]`.
    pub fn random(opts: &SynthOptions) -> Result<Self> {
        if opts.n_classes == 0 || opts.n_actions == 0 || opts.dim == 0 {
            return contract("synthetic layout needs at least one class, action and dimension");
        }
        if opts.active_actions == 0 || opts.active_actions > opts.n_actions {
            return contract("active actions must be between 1 and the number of actions");
        }
        let mut rng = SeededRng::new(opts.seed);
        let support = (opts.dim / 8).max(1);
        let mut dirs = DenseMatrix::zeros(opts.n_actions, opts.dim);
        for a in 0..opts.n_actions {
            let mut coords: Vec<usize> = (0..opts.dim).collect();
            rng.shuffle(&mut coords);
            let row = dirs.row_mut(a);
            for &c in &coords[..support] {
                row[c] = rng.normal().abs() + 1e-3;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }

        let mut profiles = DenseMatrix::zeros(opts.n_classes, opts.n_actions);
        let mut used: Vec<Vec<usize>> = Vec::new();
        for k in 0..opts.n_classes {
            let mut active;
            let mut tries = 0;
            loop {
                let mut idx: Vec<usize> = (0..opts.n_actions).collect();
                rng.shuffle(&mut idx);
                active = idx[..opts.active_actions].to_vec();
                active.sort_unstable();
                tries += 1;
                if !used.contains(&active) || tries > 1000 {
                    break;
                }
            }
            used.push(active.clone());
            let row = profiles.row_mut(k);
            for v in row.iter_mut() {
                *v = rng.uniform(0.0, 0.3);
            }
            for &a in &active {
                row[a] = rng.uniform(0.7, 1.3);
            }
        }

        let spec = Self {
            action_dirs: dirs,
            class_profiles: profiles,
            noise_sigma: opts.noise_sigma,
            jitter: opts.jitter,
            samples_per_class: opts.samples_per_class,
            seed: opts.seed,
            class_names: default_class_names(opts.n_classes),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_classes(&self) -> usize {
        self.class_profiles.rows()
    }

    pub fn dim(&self) -> usize {
        self.action_dirs.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_profiles.cols() != self.action_dirs.rows() {
            return contract("class profiles and action directions disagree on action count");
        }
        if self.class_names.len() != self.n_classes() {
            return contract("class name count differs from class profile count");
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter >= 0.0) {
            return contract("noise sigma and jitter must be ≥ 0");
        }
        for a in 0..self.action_dirs.rows() {
            let norm = self.action_dirs.row(a).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return contract(format!("action direction {a} has norm {norm}, expected 1"));
            }
        }
        if self.class_profiles.data().iter().any(|&v| v < 0.0) {
            return contract("class profiles must be non-negative");
        }
        for k in 0..self.n_classes() {
            for l in (k + 1)..self.n_classes() {
                if self.class_profiles.row(k) == self.class_profiles.row(l) {
                    return contract(format!("classes {k} and {l} have identical profiles"));
                }
            }
        }
        Ok(())
    }

    /// Noise-free class prototype `Σ_a profile[k][a] · dir_a`.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (a, &w) in self.class_profiles.row(class).iter().enumerate() {
            for (o, d) in out.iter_mut().zip(self.action_dirs.row(a)) {
                *o += w * d;
            }
        }
        out
    }
}

/// Sample `i` of class `k` is `Σ_a profile[k][a]·(1 + u_{i,a})·dir_a + ε`,
/// clamped at zero. Rows are grouped by class.
pub fn generate(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let k = spec.n_classes();
    let p = spec.dim();
    let n_actions = spec.action_dirs.rows();
    let n = k * spec.samples_per_class;
    let mut rng = SeededRng::new(spec.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut features = DenseMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    for class in 0..k {
        for s in 0..spec.samples_per_class {
            let row = features.row_mut(class * spec.samples_per_class + s);
            for a in 0..n_actions {
                let u = if spec.jitter > 0.0 {
                    rng.uniform(-spec.jitter, spec.jitter)
                } else {
                    0.0
                };
                let w = spec.class_profiles.get(class, a) * (1.0 + u);
                for (o, d) in row.iter_mut().zip(spec.action_dirs.row(a)) {
                    *o += w * d;
                }
            }
            for o in row.iter_mut() {
                if spec.noise_sigma > 0.0 {
                    *o += spec.noise_sigma * rng.normal();
                }
                *o = o.max(0.0);
            }
            labels.push(class);
        }
    }
    FeatureDataset::new(features, labels, spec.class_names.clone())
}

/// `label,f_1,…,f_P`, one row per sample.
pub fn save_csv(data: &FeatureDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=data.dim()).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(data.dim() + 1);
    for i in 0..data.len() {
        record.clear();
        record.push(data.labels[i].to_string());
        record.extend(data.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`save_csv`]; labels must be below `n_classes`.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<FeatureDataset> {
    let parse_err = |line: u64, msg: String| FdrlError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(parse_err(1, "header must be `label,f_1,…,f_P`".into()));
    }
    let p = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |pos| pos.line());
        if rec.len() != p + 1 {
            return Err(parse_err(line, format!("expected {} columns, found {}", p + 1, rec.len())));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &rec[0])))?;
        if label >= n_classes {
            return Err(parse_err(line, format!("label {label} out of range for {n_classes} classes")));
        }
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
    }
    let features = DenseMatrix::from_vec(labels.len(), p, values)?;
    FeatureDataset::new(features, labels, default_class_names(n_classes))
}

/// Little-endian: magic, version, N, P, K, `N×P` f32 row-major, `N` u32 labels.
pub fn save_bin(data: &FeatureDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_bin(data)?)?;
    Ok(())
}

pub fn encode_bin(data: &FeatureDataset) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| FdrlError::Format(format!("{what} {v} does not fit in u32")))
    };
    let n = to_u32(data.len(), "sample count")?;
    let p = to_u32(data.dim(), "dimension")?;
    let k = to_u32(data.n_classes(), "class count")?;
    let mut buf = Vec::with_capacity(20 + data.len() * (data.dim() * 4 + 4));
    buf.extend_from_slice(&BIN_MAGIC);
    for v in [BIN_VERSION, n, p, k] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data.features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &data.labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    Ok(buf)
}

pub fn load_bin(path: &Path) -> Result<FeatureDataset> {
    decode_bin(&fs::read(path)?)
}

pub fn decode_bin(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != BIN_MAGIC {
        return Err(FdrlError::Format("bad magic, expected `FDRL`".into()));
    }
    let version = cur.u32()?;
    if version != BIN_VERSION {
        return Err(FdrlError::Format(format!("unsupported version {version}")));
    }
    let n = cur.u32()? as usize;
    let p = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let expected = n
        .checked_mul(p)
        .and_then(|np| np.checked_add(n))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| FdrlError::Format("header sizes overflow".into()))?;
    if cur.remaining() != expected {
        return Err(FdrlError::Format(format!(
            "payload is {} bytes, header implies {expected}",
            cur.remaining()
        )));
    }
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n * p {
        values.push(cur.f32()? as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = cur.u32()? as usize;
        if l >= k {
            return Err(FdrlError::Format(format!("label {l} out of range for {k} classes")));
        }
        labels.push(l);
    }
    let features = DenseMatrix::from_vec(n, p, values)?;
    FeatureDataset::new(features, labels, default_class_names(k))
}

/// Picks the loader by extension: `.bin` is binary, anything else CSV.
pub fn load_any(path: &Path, n_classes: usize) -> Result<FeatureDataset> {
    if path.extension().is_some_and(|e| e == "bin") {
        let data = load_bin(path)?;
        if data.n_classes() != n_classes {
            return Err(FdrlError::Format(format!(
                "{} declares {} classes, expected {n_classes}",
                path.display(),
                data.n_classes()
            )));
        }
        Ok(data)
    } else {
        load_csv(path, n_classes)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FdrlError::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_opts(seed: u64) -> SynthOptions {
        SynthOptions {
            n_classes: 4,
            n_actions: 5,
            dim: 24,
            samples_per_class: 6,
            seed,
            ..SynthOptions::default()
        }
    }

    #[test]
    fn noiseless_unjittered_classes_are_constant() {
        let mut spec = SynthSpec::random(&small_opts(3)).unwrap();
        spec.noise_sigma = 0.0;
        spec.jitter = 0.0;
        let d = generate(&spec).unwrap();
        for i in 0..d.len() {
            let first = d.labels[i] * spec.samples_per_class;
            assert_eq!(d.features.row(i), d.features.row(first));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::random(&small_opts(9)).unwrap();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(SynthSpec::random(&small_opts(9)).unwrap(), spec);
    }

    #[test]
    fn nearest_profile_oracle_is_perfect_without_noise() {
        // Orthogonal directions (basis vectors), disjoint profiles.
        let p = 6;
        let mut dirs = DenseMatrix::zeros(3, p);
        for a in 0..3 {
            dirs.set(a, 2 * a, 1.0);
        }
        let profiles =
            DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.2, 0.0], vec![0.0, 0.0, 0.9]]).unwrap();
        let spec = SynthSpec {
            action_dirs: dirs,
            class_profiles: profiles,
            noise_sigma: 0.0,
            jitter: 0.3,
            samples_per_class: 50,
            seed: 4,
            class_names: default_class_names(3),
        };
        let d = generate(&spec).unwrap();
        let protos: Vec<Vec<f64>> = (0..3).map(|k| spec.prototype(k)).collect();
        for i in 0..d.len() {
            let x = d.features.row(i);
            let pred = (0..3)
                .min_by(|&a, &b| {
                    let da = crate::numerics::sq_dist(x, &protos[a]);
                    let db = crate::numerics::sq_dist(x, &protos[b]);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(pred, d.labels[i]);
        }
    }

    #[test]
    fn identical_profiles_rejected() {
        let mut spec = SynthSpec::random(&small_opts(1)).unwrap();
        let row = spec.class_profiles.row(0).to_vec();
        spec.class_profiles.row_mut(1).copy_from_slice(&row);
        assert!(matches!(generate(&spec), Err(FdrlError::Contract(_))));
    }

    #[test]
    fn shape_and_nonnegativity() {
        let spec = SynthSpec::random(&small_opts(5)).unwrap();
        let d = generate(&spec).unwrap();
        assert_eq!(d.len(), 4 * 6);
        assert!(d.features.data().iter().all(|&v| v >= 0.0));
        assert_eq!(d.class_counts(), vec![6; 4]);
    }

    #[test]
    fn split_per_class_counts() {
        let d = generate(&SynthSpec::random(&small_opts(2)).unwrap()).unwrap();
        let (a, b) = d.split_per_class(4);
        assert_eq!(a.class_counts(), vec![4; 4]);
        assert_eq!(b.class_counts(), vec![2; 4]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = generate(&SynthSpec::random(&small_opts(7)).unwrap()).unwrap();
        save_csv(&d, &path).unwrap();
        assert_eq!(load_csv(&path, 4).unwrap(), FeatureDataset { class_names: default_class_names(4), ..d });

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "label,f_1,f_2\n0,1.0,2.0\n1,3.0\n").unwrap();
        match load_csv(&bad, 7) {
            Err(FdrlError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&bad, "label,f_1\n9,1.0\n").unwrap();
        let err = load_csv(&bad, 7).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn bin_layout_size() {
        let d = FeatureDataset::new(
            DenseMatrix::from_rows(&[vec![1.5, -2.0]]).unwrap(),
            vec![0],
            default_class_names(7),
        )
        .unwrap();
        let bytes = encode_bin(&d).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..4], b"FDRL");
        assert_eq!(decode_bin(&bytes).unwrap(), d);
    }

    #[test]
    fn bin_rejects_corruption() {
        let d = generate(&SynthSpec::random(&small_opts(8)).unwrap()).unwrap();
        let bytes = encode_bin(&d).unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode_bin(&bytes[..cut]), Err(FdrlError::Format(_))));
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_bin(&wrong), Err(FdrlError::Format(_))));
        let mut wrong = bytes;
        wrong[4] = 2;
        assert!(matches!(decode_bin(&wrong), Err(FdrlError::Format(_))));
    }

    proptest! {
        #[test]
        fn bin_round_trip_is_f32_exact(seed in any::<u64>()) {
            let d = generate(&SynthSpec::random(&small_opts(seed)).unwrap()).unwrap();
            let back = decode_bin(&encode_bin(&d).unwrap()).unwrap();
            prop_assert_eq!(&back.labels, &d.labels);
            for (a, b) in back.features.data().iter().zip(d.features.data()) {
                prop_assert_eq!(*a, (*b as f32) as f64);
            }
        }
    }
}
