//! Synthetic multi-domain benchmark.
//!
//! Every domain shares the latent-to-target function and differs only in
//! how latents are observed. Domain `i` sits at angle `theta_i` on a circle
//! of transforms: feature `j` is scaled by `1 + a·sin(theta + 2πj/d)` and
//! shifted by `b·cos(theta + 2πj/d)`, then observation noise is added.
//!
//! On disk a dataset is a directory with `manifest.json` and one blob
//! `dom_<id>.f64` per domain. A blob holds `n` rows of `d + 2` little-endian
//! `f64`: the features, the regression target and the class label.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{TaskKind, TaskTarget};
use crate::rng::{self, normal, streams};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Position on the domain manifold, radians.
    pub theta: f64,
    pub gain_amplitude: f64,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let finite =
            [self.theta, self.gain_amplitude, self.bias_amplitude, self.noise_sigma].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("domain_spec", format!("non-finite field in {self:?}")));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::domain("domain_spec", format!("noise sigma {} < 0", self.noise_sigma)));
        }
        if self.gain_amplitude.abs() >= 1.0 {
            return Err(Error::domain(
                "domain_spec",
                format!("gain amplitude {} would allow non-positive gains", self.gain_amplitude),
            ));
        }
        Ok(())
    }

    fn phase(&self, j: usize, d: usize) -> f64 {
        self.theta + 2.0 * PI * j as f64 / d as f64
    }

    pub fn gain(&self, j: usize, d: usize) -> f64 {
        1.0 + self.gain_amplitude * self.phase(j, d).sin()
    }

    pub fn offset(&self, j: usize, d: usize) -> f64 {
        self.bias_amplitude * self.phase(j, d).cos()
    }

    /// Observed features for latent `z` and standard-normal noise `eps`.
    pub fn observe(&self, z: &[f64], eps: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d).map(|j| self.gain(j, d) * z[j] + self.offset(j, d) + self.noise_sigma * eps[j]).collect()
    }
}

/// `Σ_j c_j · sin(z_j)`.
pub fn regression_target(z: &[f64], coefficients: &[f64]) -> f64 {
    z.iter().zip(coefficients).map(|(zj, cj)| cj * zj.sin()).sum()
}

/// Class 1 when the regression target is strictly positive, else 0.
pub fn class_label(y: f64) -> usize {
    usize::from(y > 0.0)
}

/// Task coefficients `c ~ N(0, 1)`, drawn from the task stream of `seed`.
pub fn task_coefficients(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, streams::TASK);
    (0..d).map(|_| normal(&mut r)).collect()
}

/// Samples of one domain held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    /// `[n, d]` observed features.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Draws `n` samples of a domain. For each sample the latent `z` is drawn
/// first, then the observation noise.
pub fn generate_domain(spec: &DomainSpec, n: usize, coefficients: &[f64], rng: &mut impl Rng) -> Result<DomainData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::domain("generate_domain", "n must be >= 1"));
    }
    let d = coefficients.len();
    if d == 0 {
        return Err(Error::domain("generate_domain", "empty coefficient vector"));
    }
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut eps = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = normal(rng));
        eps.iter_mut().for_each(|v| *v = normal(rng));
        x.extend(spec.observe(&z, &eps));
        let target = regression_target(&z, coefficients);
        y.push(target);
        labels.push(class_label(target));
    }
    Ok(DomainData { spec: spec.clone(), x: Tensor::new(vec![n, d], x)?, y, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub domain_id: usize,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub d: usize,
    pub task_kind: TaskKind,
    pub samples_per_domain: usize,
    pub seed: u64,
    pub task_seed: u64,
    pub task_coefficients: Vec<f64>,
    pub domains: Vec<DomainSpec>,
    pub files: Vec<DataFile>,
}

impl DatasetManifest {
    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.domain_id).collect()
    }

    pub fn domain_index(&self, domain_id: usize) -> Option<usize> {
        self.domains.iter().position(|d| d.domain_id == domain_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub domains: Vec<DomainData>,
}

/// Parameters of [`make_benchmark`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub domains: usize,
    pub samples_per_domain: usize,
    pub d: usize,
    pub gain_amplitude: f64,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
    pub task_kind: TaskKind,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            domains: 5,
            samples_per_domain: 2000,
            d: 16,
            gain_amplitude: 0.4,
            bias_amplitude: 0.5,
            noise_sigma: 0.05,
            task_kind: TaskKind::Regression,
            seed: 0,
        }
    }
}

/// `k` angles equally spaced on `[0, π]`.
pub fn manifold_thetas(k: usize) -> Vec<f64> {
    (0..k).map(|i| PI * i as f64 / (k - 1) as f64).collect()
}

/// Generates a benchmark in memory. Domain `i` draws from its own random
/// stream, so domains are independent of generation order.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Dataset> {
    if spec.domains < 3 {
        return Err(Error::domain("make_benchmark", format!("need >= 3 domains, got {}", spec.domains)));
    }
    let coefficients = task_coefficients(spec.d, spec.seed);
    let mut domains = Vec::with_capacity(spec.domains);
    for (i, theta) in manifold_thetas(spec.domains).into_iter().enumerate() {
        let ds = DomainSpec {
            domain_id: i,
            theta,
            gain_amplitude: spec.gain_amplitude,
            bias_amplitude: spec.bias_amplitude,
            noise_sigma: spec.noise_sigma,
        };
        let mut r = rng::stream(spec.seed, streams::DATA_BASE + i as u64);
        domains.push(generate_domain(&ds, spec.samples_per_domain, &coefficients, &mut r)?);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        d: spec.d,
        task_kind: spec.task_kind,
        samples_per_domain: spec.samples_per_domain,
        seed: spec.seed,
        task_seed: spec.seed,
        task_coefficients: coefficients,
        domains: domains.iter().map(|d| d.spec.clone()).collect(),
        files: Vec::new(),
    };
    Ok(Dataset { manifest, domains })
}

/// Generates a benchmark and writes it to `dir`.
pub fn make_benchmark(dir: &Path, spec: &BenchmarkSpec) -> Result<Dataset> {
    let mut ds = generate_benchmark(spec)?;
    save_dataset(dir, &mut ds)?;
    Ok(ds)
}

fn blob_name(domain_id: usize) -> String {
    format!("dom_{domain_id}.f64")
}

fn encode_domain(dom: &DomainData) -> Vec<u8> {
    let d = dom.x.shape()[1];
    let mut out = Vec::with_capacity(dom.len() * (d + 2) * 8);
    for r in 0..dom.len() {
        for v in dom.x.row(r) {
            out.extend(v.to_le_bytes());
        }
        out.extend(dom.y[r].to_le_bytes());
        out.extend((dom.labels[r] as f64).to_le_bytes());
    }
    out
}

/// Writes blobs and the manifest, refreshing the manifest's file table.
pub fn save_dataset(dir: &Path, ds: &mut Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.domains.len());
    for dom in &ds.domains {
        let bytes = encode_domain(dom);
        let name = blob_name(dom.spec.domain_id);
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(DataFile {
            domain_id: dom.spec.domain_id,
            file: name,
            rows: dom.len(),
            cols: ds.manifest.d + 2,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    ds.manifest.files = files;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &mpath,
            format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
        ));
    }
    let d = manifest.d;
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for spec in &manifest.domains {
        let file = manifest
            .files
            .iter()
            .find(|f| f.domain_id == spec.domain_id)
            .ok_or_else(|| Error::format(&mpath, format!("no file for domain {}", spec.domain_id)))?;
        let path = dir.join(&file.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if file.cols != d + 2 || bytes.len() != file.rows * file.cols * 8 {
            return Err(Error::format(
                &path,
                format!("{} bytes for {} rows of {} columns", bytes.len(), file.rows, file.cols),
            ));
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != file.sha256 {
            return Err(Error::format(&path, "checksum mismatch"));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let mut x = Vec::with_capacity(file.rows * d);
        let mut y = Vec::with_capacity(file.rows);
        let mut labels = Vec::with_capacity(file.rows);
        for row in values.chunks_exact(d + 2) {
            x.extend_from_slice(&row[..d]);
            y.push(row[d]);
            let label = row[d + 1];
            if label != 0.0 && label != 1.0 {
                return Err(Error::format(&path, format!("class label {label} is not 0 or 1")));
            }
            labels.push(label as usize);
        }
        domains.push(DomainData { spec: spec.clone(), x: Tensor::new(vec![file.rows, d], x)?, y, labels });
    }
    Ok(Dataset { manifest, domains })
}

/// One sample, addressed by manifest domain index and row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub domain: usize,
    pub row: usize,
}

impl SampleRef {
    /// Globally unique id of the sample within its dataset.
    pub fn id(self) -> u64 {
        ((self.domain as u64) << 32) | self.row as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

/// The last tenth of each domain (at least one row when a domain has two
/// or more) goes to validation, the rest to training.
fn train_val_rows(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_val = if n >= 2 { ((n as f64 * 0.1).round() as usize).max(1) } else { 0 };
    (0..n - n_val, n - n_val..n)
}

/// All domains used for training and validation, no test stream.
pub fn split_supervised(ds: &Dataset) -> Split {
    let mut split = Split::default();
    for (di, dom) in ds.domains.iter().enumerate() {
        let (tr, va) = train_val_rows(dom.len());
        split.train.extend(tr.map(|row| SampleRef { domain: di, row }));
        split.val.extend(va.map(|row| SampleRef { domain: di, row }));
    }
    split
}

/// Holds out every sample of `target_domain` (a manifest domain id) as the
/// test stream; the other domains are split 90/10 per domain.
pub fn split_leave_one_out(ds: &Dataset, target_domain: usize) -> Result<Split> {
    let target = ds
        .manifest
        .domain_index(target_domain)
        .ok_or_else(|| Error::domain("split_leave_one_out", format!("unknown domain {target_domain}")))?;
    let mut split = Split::default();
    for (di, dom) in ds.domains.iter().enumerate() {
        if di == target {
            split.test.extend((0..dom.len()).map(|row| SampleRef { domain: di, row }));
            continue;
        }
        let (tr, va) = train_val_rows(dom.len());
        split.train.extend(tr.map(|row| SampleRef { domain: di, row }));
        split.val.extend(va.map(|row| SampleRef { domain: di, row }));
    }
    Ok(split)
}

/// Inputs with task and domain supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// `[B, d]`
    pub x: Tensor,
    pub y_task: TaskTarget,
    /// Manifest domain index of each row.
    pub y_domain: Vec<usize>,
    pub ids: Vec<u64>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.y_domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_domain.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> DomainBatch {
        let y_task = match &self.y_task {
            TaskTarget::Regression(t) => TaskTarget::Regression(t.select_rows(rows)),
            TaskTarget::Classification(l) => TaskTarget::Classification(rows.iter().map(|&r| l[r]).collect()),
        };
        DomainBatch {
            x: self.x.select_rows(rows),
            y_task,
            y_domain: rows.iter().map(|&r| self.y_domain[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    /// Distinct domains present, ascending.
    pub fn domains(&self) -> Vec<usize> {
        let mut d = self.y_domain.clone();
        d.sort_unstable();
        d.dedup();
        d
    }
}

impl Dataset {
    pub fn d(&self) -> usize {
        self.manifest.d
    }

    pub fn batch(&self, refs: &[SampleRef], kind: TaskKind) -> DomainBatch {
        let d = self.d();
        let mut x = Vec::with_capacity(refs.len() * d);
        let mut y_domain = Vec::with_capacity(refs.len());
        let mut ids = Vec::with_capacity(refs.len());
        for r in refs {
            x.extend_from_slice(self.domains[r.domain].x.row(r.row));
            y_domain.push(r.domain);
            ids.push(r.id());
        }
        let y_task = match kind {
            TaskKind::Regression => TaskTarget::Regression(
                Tensor::new(vec![refs.len(), 1], refs.iter().map(|r| self.domains[r.domain].y[r.row]).collect())
                    .expect("one target per row"),
            ),
            TaskKind::Classification => {
                TaskTarget::Classification(refs.iter().map(|r| self.domains[r.domain].labels[r.row]).collect())
            }
        };
        DomainBatch { x: Tensor::new(vec![refs.len(), d], x).expect("rows of width d"), y_task, y_domain, ids }
    }

    /// SHA-256 over the manifest and all domain blobs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest.domains).expect("serialises"));
        for dom in &self.domains {
            h.update(encode_domain(dom));
        }
        hex::encode(h.finalize())
    }
}

/// Shuffled mini-batches in which every batch spans at least two domains
/// whenever the data has two or more.
///
/// A final batch of one element is merged into the previous batch. When a
/// domain is too rare to reach every batch, batches may grow past
/// `batch_size`.
pub fn domain_balanced_batches(domains: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let n = domains.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, rng);
    let batch_size = batch_size.max(2);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    let multi_domain = domains.iter().any(|&d| d != domains[0]);
    if !multi_domain {
        return batches;
    }
    for bi in 0..batches.len() {
        let first = domains[batches[bi][0]];
        if batches[bi].iter().any(|&i| domains[i] != first) {
            continue;
        }
        // Swap the last element with the nearest sample from another domain.
        'search: for bj in (0..batches.len()).filter(|&j| j != bi) {
            for pos in 0..batches[bj].len() {
                let cand = batches[bj][pos];
                if domains[cand] == first {
                    continue;
                }
                // Keep the donor batch multi-domain if it has to give up a sample.
                let donor_ok = batches[bj].len() < 2
                    || batches[bj].iter().enumerate().any(|(p, &i)| p != pos && domains[i] != domains[cand])
                    || batches[bj].iter().filter(|&&i| domains[i] == domains[cand]).count() > 1;
                if !donor_ok {
                    continue;
                }
                let last = batches[bi].len() - 1;
                let moved = batches[bi][last];
                batches[bi][last] = cand;
                batches[bj][pos] = moved;
                break 'search;
            }
        }
    }
    // With fewer off-domain samples than batches some batches stay
    // single-domain; fold each into the nearest mixed batch.
    let mixed = |b: &Vec<usize>| b.iter().any(|&i| domains[i] != domains[b[0]]);
    if batches.iter().all(mixed) {
        return batches;
    }
    let keep: Vec<usize> = (0..batches.len()).filter(|&i| mixed(&batches[i])).collect();
    if keep.is_empty() {
        return vec![batches.concat()];
    }
    let mut out: Vec<Vec<usize>> = keep.iter().map(|&i| batches[i].clone()).collect();
    for (i, b) in batches.iter().enumerate() {
        if mixed(b) {
            continue;
        }
        let nearest = (0..keep.len()).min_by_key(|&k| keep[k].abs_diff(i)).expect("non-empty");
        out[nearest].extend(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> BenchmarkSpec {
        BenchmarkSpec { domains: 5, samples_per_domain: 50, d: 6, seed: 3, ..Default::default() }
    }

    #[test]
    fn identity_domain_observes_latent() {
        let spec = DomainSpec { domain_id: 0, theta: 1.1, gain_amplitude: 0.0, bias_amplitude: 0.0, noise_sigma: 0.0 };
        let z = [0.3, -1.2, 2.5, 0.0];
        let eps = [1.0, -1.0, 0.5, 3.0];
        assert_eq!(spec.observe(&z, &eps), z.to_vec());
    }

    #[test]
    fn zero_latent_gives_zero_target_and_class_zero() {
        let c = task_coefficients(8, 1);
        let y = regression_target(&[0.0; 8], &c);
        assert_eq!(y, 0.0);
        assert_eq!(class_label(y), 0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec =
            DomainSpec { domain_id: 0, theta: 0.0, gain_amplitude: 1.0, bias_amplitude: 0.5, noise_sigma: 0.1 };
        assert!(spec.validate().is_err());
        spec.gain_amplitude = 0.4;
        spec.noise_sigma = -0.1;
        assert!(spec.validate().is_err());
        spec.noise_sigma = 0.0;
        assert!(spec.validate().is_ok());
        assert!(generate_domain(&spec, 0, &[1.0], &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn benchmark_thetas_equally_spaced() {
        let t = manifold_thetas(5);
        let expect = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0, PI];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let small = BenchmarkSpec { domains: 2, ..small_spec() };
        assert!(generate_benchmark(&small).is_err());
    }

    #[test]
    fn loo_split_hygiene() {
        let ds = generate_benchmark(&small_spec()).unwrap();
        let split = split_leave_one_out(&ds, 2).unwrap();
        assert_eq!(split.test.len(), 50);
        assert!(split.test.iter().all(|r| r.domain == 2));
        let mut train_domains: Vec<usize> = split.train.iter().chain(&split.val).map(|r| r.domain).collect();
        train_domains.sort_unstable();
        train_domains.dedup();
        assert_eq!(train_domains, vec![0, 1, 3, 4]);
        assert_eq!(split.val.len(), 4 * 5);
        assert!(split_leave_one_out(&ds, 9).is_err());
    }

    #[test]
    fn balanced_batches_span_two_domains() {
        // Heavily imbalanced labels make single-domain batches likely.
        let mut domains = vec![0; 97];
        domains.extend([1, 1, 1]);
        let batches = domain_balanced_batches(&domains, 4, &mut rng::stream(5, 0));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        let multi = batches.iter().filter(|b| b.iter().any(|&i| domains[i] != domains[b[0]])).count();
        // Only three minority samples exist, so at most three batches can be mixed.
        assert_eq!(multi, 3);

        let domains: Vec<usize> = (0..101).map(|i| i % 3).collect();
        let batches = domain_balanced_batches(&domains, 8, &mut rng::stream(6, 0));
        assert!(batches.iter().all(|b| b.len() >= 2));
        assert!(batches.iter().all(|b| b.iter().any(|&i| domains[i] != domains[b[0]])));
    }
}
