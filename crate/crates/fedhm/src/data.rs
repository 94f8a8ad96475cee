//! Dataset provisioning and federated partitioning.
//!
//! Synthetic class-conditional generators for desk-scale experiments, IDX and
//! CSV file loaders, and the IID / Dirichlet non-IID splits that hand each
//! client a disjoint slice of the sample indices.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labelled dataset: features (N, ch, H, W) or (N, d), labels in [0, C).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if self.features.shape()[0] != self.len() {
            return Err(Error::Data("feature rows do not match label count".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        self.features.check_finite("dataset features")?;
        Ok(())
    }

    /// New dataset holding only the rows at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            classes: self.classes,
        }
    }

    /// Gathers the rows at `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row: usize = self.features.shape()[1..].iter().product();
        let mut shape = self.features.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        let features = Tensor::new(&shape, data).expect("gather preserves finiteness");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }
}

/// Shape of synthetic features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

/// Class-conditional Gaussian blobs around well-separated anchors.
///
/// Anchor patterns are drawn once per class from the seed, then rescaled so
/// every pair of class means sits at least `4σ` apart; samples add
/// `σ`-scaled white noise. At `σ = 0` classes are perfectly separable.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    shape: SynthShape,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if per_class < 1 {
        return Err(Error::InvalidArgument("need at least 1 sample per class".into()));
    }
    if noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    let dims: Vec<usize> = match shape {
        SynthShape::Vector { dim } => vec![dim],
        SynthShape::Image {
            channels,
            height,
            width,
        } => vec![channels, height, width],
    };
    let row: usize = dims.iter().product();
    if row == 0 {
        return Err(Error::InvalidArgument("empty feature shape".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..row)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect()
        })
        .collect();

    // enforce the 4σ pairwise-separation floor by rescaling all anchors
    let min_dist = anchors
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            anchors[i + 1..].iter().map(move |b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .fold(f64::INFINITY, f64::min);
    let floor = 4.0 * noise;
    if min_dist > 0.0 && min_dist < floor {
        let scale = floor / min_dist;
        for a in anchors.iter_mut() {
            for x in a.iter_mut() {
                *x *= scale;
            }
        }
    }

    let n = classes * per_class;
    let mut feat_shape = vec![n];
    feat_shape.extend_from_slice(&dims);
    let mut data = Vec::with_capacity(n * row);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            for &a in &anchors[c] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(a + noise * z);
            }
            labels.push(c);
        }
    }
    let ds = Dataset {
        features: Tensor::new(&feat_shape, data)?,
        labels,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// File loaders
// ---------------------------------------------------------------------------

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::format(
            offset as u64,
            "file truncated while reading a 32-bit field",
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label file pair (big-endian magics 0x803 / 0x801).
/// Pixels scale to [0, 1]; see [`normalize_pair`] for train-statistics
/// standardization.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::format(
            0,
            format!("bad image magic 0x{magic:08x}, want 0x{IDX_MAGIC_IMAGES:08x}"),
        ));
    }
    let n = read_be_u32(&img, 4)? as usize;
    let h = read_be_u32(&img, 8)? as usize;
    let w = read_be_u32(&img, 12)? as usize;
    let expected = 16 + n * h * w;
    if img.len() < expected {
        return Err(Error::format(
            img.len() as u64,
            format!("image payload truncated: need {expected} bytes"),
        ));
    }

    let magic = read_be_u32(&lab, 0)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::format(
            0,
            format!("bad label magic 0x{magic:08x}, want 0x{IDX_MAGIC_LABELS:08x}"),
        ));
    }
    let n_lab = read_be_u32(&lab, 4)? as usize;
    if n_lab != n {
        return Err(Error::format(
            4,
            format!("{n} images but {n_lab} labels"),
        ));
    }
    if lab.len() < 8 + n {
        return Err(Error::format(
            lab.len() as u64,
            "label payload truncated",
        ));
    }
    if n == 0 {
        return Err(Error::Data("IDX file holds no samples".into()));
    }

    let data: Vec<f64> = img[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let ds = Dataset {
        features: Tensor::new(&[n, 1, h, w], data)?,
        labels,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a CSV of `label, feature...` rows (header optional).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width = None;
    let mut offset = 0u64;
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        let line_len = line.len() as u64 + 1;
        if trimmed.is_empty() {
            offset += line_len;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let first_parses = fields[0].parse::<f64>().is_ok();
        if line_no == 0 && !first_parses {
            // header row
            offset += line_len;
            continue;
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::format(offset, format!("label `{}` is not an integer", fields[0]))
        })?;
        let feats: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(offset, format!("feature `{f}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if feats.is_empty() {
            return Err(Error::format(offset, "row has a label but no features"));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::format(
                    offset,
                    format!("row width {} differs from first row {}", feats.len(), w),
                ));
            }
            _ => {}
        }
        rows.push((label, feats));
        offset += line_len;
    }
    if rows.is_empty() {
        return Err(Error::Data("CSV holds no samples".into()));
    }
    let d = width.unwrap();
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (label, feats) in rows {
        labels.push(label);
        data.extend_from_slice(&feats);
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let ds = Dataset {
        features: Tensor::new(&[n, d], data)?,
        labels,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Standardizes both splits to zero mean and unit variance per channel
/// (per feature column for vector data), using the train split's statistics
/// for both.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<()> {
    if train.features.shape()[1..] != test.features.shape()[1..] {
        return Err(Error::Data("train/test feature shapes differ".into()));
    }
    let image = train.features.ndim() == 4;
    let groups = train.features.shape()[1];
    let group_span = |t: &Tensor| -> usize {
        if image {
            t.shape()[2] * t.shape()[3]
        } else {
            1
        }
    };

    for g in 0..groups {
        let span_train = group_span(&train.features);
        let n_train = train.features.shape()[0];
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in 0..n_train {
            let base = (row * groups + g) * span_train;
            for i in 0..span_train {
                sum += train.features.data()[base + i];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let mut var = 0.0;
        for row in 0..n_train {
            let base = (row * groups + g) * span_train;
            for i in 0..span_train {
                let d = train.features.data()[base + i] - mean;
                var += d * d;
            }
        }
        let inv = 1.0 / (var / count as f64).sqrt().max(1e-12);

        for ds in [&mut *train, &mut *test] {
            let span = group_span(&ds.features);
            let rows = ds.features.shape()[0];
            for row in 0..rows {
                let base = (row * groups + g) * span;
                for i in 0..span {
                    let v = &mut ds.features.data_mut()[base + i];
                    *v = (*v - mean) * inv;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Which scheme generated a partition, kept for run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Disjoint per-client index lists covering the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness, exact cover of `0..n`, and no empty client.
    pub fn check_exact_cover(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Data(format!("client {c} received no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::Data(format!("index {i} out of range {n}")));
                }
                if seen[i] {
                    return Err(Error::Data(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::Data("partition does not cover the dataset".into()))
        }
    }
}

/// Random permutation split into `clients` near-equal chunks
/// (sizes differ by at most one).
pub fn partition_iid(n: usize, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if clients > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let base = n / clients;
    let extra = n % clients;
    let mut out = Vec::with_capacity(clients);
    let mut cursor = 0;
    for c in 0..clients {
        let take = base + usize::from(c < extra);
        out.push(indices[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(Partition {
        clients: out,
        scheme: PartitionScheme::Iid,
        seed,
    })
}

/// Non-IID split: for each class, draw client proportions from
/// `Dir(α·1_P)` and deal that class's shuffled indices by cumulative share.
/// Draws leaving any client empty are retried a bounded number of times,
/// then repaired by donating single samples round-robin from the largest
/// clients. Deterministic per seed.
pub fn partition_dirichlet(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    let n = labels.len();
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if clients > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }

    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::Data("every class needs at least one sample".into()));
    }

    const MAX_RETRIES: u64 = 20;
    let mut assignment: Option<Vec<Vec<usize>>> = None;
    for attempt in 0..=MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e3779b97f4a7c15)));
        let candidate = dirichlet_draw(&by_class, clients, alpha, &mut rng)?;
        if candidate.iter().all(|c| !c.is_empty()) {
            assignment = Some(candidate);
            break;
        }
        if attempt == MAX_RETRIES {
            assignment = Some(candidate);
        }
    }
    let mut clients_idx = assignment.expect("assignment set in loop");

    // round-robin repair: donate from the largest clients to empty ones
    loop {
        let empty = match clients_idx.iter().position(|c| c.is_empty()) {
            Some(e) => e,
            None => break,
        };
        let donor = clients_idx
            .iter()
            .enumerate()
            .max_by_key(|(i, c)| (c.len(), usize::MAX - i))
            .map(|(i, _)| i)
            .expect("at least one client");
        if clients_idx[donor].len() <= 1 {
            return Err(Error::Data(
                "cannot repair partition: not enough samples".into(),
            ));
        }
        let moved = clients_idx[donor].pop().expect("donor non-empty");
        clients_idx[empty].push(moved);
    }

    let partition = Partition {
        clients: clients_idx,
        scheme: PartitionScheme::Dirichlet { alpha },
        seed,
    };
    partition.check_exact_cover(n)?;
    Ok(partition)
}

fn dirichlet_draw(
    by_class: &[Vec<usize>],
    clients: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class_indices in by_class {
        let mut indices = class_indices.clone();
        indices.shuffle(rng);
        let shares: Vec<f64> = if clients == 1 {
            vec![1.0]
        } else {
            let dir = Dirichlet::new(&vec![alpha; clients]).map_err(|e| {
                Error::InvalidArgument(format!("dirichlet parameters rejected: {e}"))
            })?;
            dir.sample(rng)
        };
        // cumulative shares -> cut points into this class's index list
        let total = indices.len();
        let mut cuts = Vec::with_capacity(clients + 1);
        cuts.push(0usize);
        let mut acc = 0.0;
        for share in shares.iter().take(clients - 1) {
            acc += share;
            let cut = (acc * total as f64).round() as usize;
            cuts.push(cut.clamp(*cuts.last().unwrap(), total));
        }
        cuts.push(total);
        for (c, w) in cuts.windows(2).enumerate() {
            out[c].extend_from_slice(&indices[w[0]..w[1]]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn synth_blobs_deterministic_and_separated() {
        let a = synth_blobs(3, 5, SynthShape::Vector { dim: 8 }, 0.3, 7).unwrap();
        let b = synth_blobs(3, 5, SynthShape::Vector { dim: 8 }, 0.3, 7).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);

        // per-class means are at least 4σ apart
        let (nrows, d) = (a.len(), 8usize);
        let mut means = vec![vec![0.0; d]; 3];
        let mut counts = vec![0usize; 3];
        for i in 0..nrows {
            let c = a.labels[i];
            counts[c] += 1;
            for j in 0..d {
                means[c][j] += a.features.data()[i * d + j];
            }
        }
        for (m, &cnt) in means.iter_mut().zip(counts.iter()) {
            for v in m.iter_mut() {
                *v /= cnt as f64;
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                let dist: f64 = means[i]
                    .iter()
                    .zip(means[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist >= 4.0 * 0.3 * 0.8, "means {i},{j} only {dist} apart");
            }
        }
    }

    #[test]
    fn synth_blobs_zero_noise_is_constant_per_class() {
        let ds = synth_blobs(2, 3, SynthShape::Vector { dim: 4 }, 0.0, 1).unwrap();
        let d = 4;
        for c in 0..2 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| &ds.features.data()[i * d..(i + 1) * d])
                .collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
        }
    }

    #[test]
    fn iid_partition_sizes_and_cover() {
        let p = partition_iid(100, 20, 3).unwrap();
        assert!(p.clients.iter().all(|c| c.len() == 5));
        p.check_exact_cover(100).unwrap();

        let p = partition_iid(10, 1, 0).unwrap();
        assert_eq!(p.clients[0].len(), 10);

        let p = partition_iid(11, 3, 5).unwrap();
        let mut sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 4, 4]);
        p.check_exact_cover(11).unwrap();

        assert!(partition_iid(3, 5, 0).is_err());
    }

    #[test]
    fn dirichlet_partition_is_exact_cover_and_deterministic() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        for seed in 0..20u64 {
            let p = partition_dirichlet(&labels, 8, 0.5, seed).unwrap();
            p.check_exact_cover(200).unwrap();
        }
        let a = partition_dirichlet(&labels, 8, 0.5, 9).unwrap();
        let b = partition_dirichlet(&labels, 8, 0.5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dirichlet_single_client_takes_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = partition_dirichlet(&labels, 1, 0.01, 4).unwrap();
        assert_eq!(p.clients[0].len(), 30);
    }

    #[test]
    fn huge_alpha_approaches_uniform_class_shares() {
        let per_class = 100usize;
        let classes = 4usize;
        let clients = 5usize;
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let mut worst: f64 = 0.0;
        for seed in 0..10u64 {
            let p = partition_dirichlet(&labels, clients, 1e6, seed).unwrap();
            for c in &p.clients {
                for cls in 0..classes {
                    let got = c.iter().filter(|&&i| labels[i] == cls).count() as f64;
                    let want = per_class as f64 / clients as f64;
                    worst = worst.max((got - want).abs() / want);
                }
            }
        }
        assert!(worst <= 0.10, "worst relative deviation {worst}");
    }

    #[test]
    fn small_alpha_concentrates_classes() {
        let labels: Vec<usize> = (0..400).map(|i| i % 8).collect();
        let median_distinct = |alpha: f64| -> f64 {
            let mut counts = Vec::new();
            for seed in 0..15u64 {
                let p = partition_dirichlet(&labels, 10, alpha, seed).unwrap();
                for c in &p.clients {
                    let distinct: HashSet<usize> = c.iter().map(|&i| labels[i]).collect();
                    counts.push(distinct.len());
                }
            }
            counts.sort_unstable();
            counts[counts.len() / 2] as f64
        };
        let low = median_distinct(0.01);
        let high = median_distinct(100.0);
        assert!(
            low < high,
            "expected fewer distinct classes at low alpha: {low} vs {high}"
        );
    }

    #[test]
    fn class_marginals_are_conserved() {
        let labels: Vec<usize> = (0..150).map(|i| (i * 7) % 5).collect();
        let p = partition_dirichlet(&labels, 6, 0.3, 11).unwrap();
        for cls in 0..5 {
            let global = labels.iter().filter(|&&l| l == cls).count();
            let summed: usize = p
                .clients
                .iter()
                .map(|c| c.iter().filter(|&&i| labels[i] == cls).count())
                .sum();
            assert_eq!(global, summed);
        }
    }

    #[test]
    fn idx_fixture_round_trip() {
        // hand-built IDX byte fixtures: two 2x3 images, two labels
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[1, 0]);

        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lab_path = dir.path().join("lab.idx");
        fs::write(&img_path, &img).unwrap();
        fs::write(&lab_path, &lab).unwrap();

        let ds = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!(ds.features.shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert!((ds.features.data()[1] - 51.0 / 255.0).abs() < 1e-12);
        assert!((ds.features.data()[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_idx_is_a_format_error() {
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 1, 2]); // far too short
        let lab = {
            let mut l = Vec::new();
            l.extend_from_slice(&0x0000_0801u32.to_be_bytes());
            l.extend_from_slice(&2u32.to_be_bytes());
            l.extend_from_slice(&[1, 0]);
            l
        };
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lab_path = dir.path().join("lab.idx");
        fs::write(&img_path, &img).unwrap();
        fs::write(&lab_path, &lab).unwrap();
        match load_idx(&img_path, &lab_path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "label,f0,f1\n").unwrap();
        assert!(load_csv(&path).is_err());

        fs::write(&path, "").unwrap();
        assert!(load_csv(&path).is_err());
    }

    #[test]
    fn csv_parses_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "label,f0,f1\n0,1.5,2.0\n1,-0.5,0.25\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.features.shape(), &[2, 2]);
        assert_eq!(ds.labels, vec![0, 1]);

        fs::write(&path, "0,1.5,2.0\n1,-0.5,0.25\n").unwrap();
        let ds2 = load_csv(&path).unwrap();
        assert_eq!(ds2.labels, ds.labels);
    }
}
