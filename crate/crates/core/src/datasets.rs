//! IDX loading, label-sorted shard partitioning, and synthetic blobs.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smallmodel::Example;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file ({reason})")]
    Truncated { path: String, reason: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("cannot write dataset: {0}")]
    Unwritable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Labelled examples with a common feature length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
    pub source: String,
    /// `(rows, cols)` when the features are images.
    pub image_dims: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn subset(&self, indices: &[usize], source: impl Into<String>) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            classes: self.classes,
            source: source.into(),
            image_dims: self.image_dims,
        }
    }

    /// Seeded split into `(first, rest)` with `first_len` examples in the
    /// first part; both parts keep the original relative order.
    pub fn split(&self, first_len: usize, rng: &mut dyn RngCore) -> (Dataset, Dataset) {
        let first_len = first_len.min(self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let (a, b) = idx.split_at_mut(first_len);
        a.sort_unstable();
        b.sort_unstable();
        (
            self.subset(a, format!("{}[split0]", self.source)),
            self.subset(b, format!("{}[split1]", self.source)),
        )
    }
}

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DatasetError::Truncated {
                path: self.path.to_string(),
                reason: format!("missing {what}"),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn read_magic(r: &mut Reader, expected: u32) -> Result<()> {
    let found = r.u32("magic")?;
    if found != expected {
        return Err(DatasetError::BadMagic {
            path: r.path.to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Loads an IDX image/label file pair; pixels are divided by 255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let lbl_bytes = fs::read(labels)?;
    parse_idx(
        &img_bytes,
        &lbl_bytes,
        &images.display().to_string(),
        &labels.display().to_string(),
    )
}

pub fn parse_idx(img_bytes: &[u8], lbl_bytes: &[u8], img_name: &str, lbl_name: &str) -> Result<Dataset> {
    let mut img = Reader {
        path: img_name,
        bytes: img_bytes,
        pos: 0,
    };
    read_magic(&mut img, IDX_IMAGES_MAGIC)?;
    let count = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;

    let mut lbl = Reader {
        path: lbl_name,
        bytes: lbl_bytes,
        pos: 0,
    };
    read_magic(&mut lbl, IDX_LABELS_MAGIC)?;
    let label_count = lbl.u32("label count")? as usize;
    if label_count != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let dim = rows * cols;
    let pixels = img.take(count * dim, "pixel data")?;
    let labels = lbl.take(count, "label data")?;
    let examples: Vec<Example> = pixels
        .chunks_exact(dim.max(1))
        .take(count)
        .zip(labels)
        .map(|(px, &l)| Example::new(px.iter().map(|&p| f64::from(p) / 255.0).collect(), l as usize))
        .collect();
    let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        examples,
        classes,
        source: img_name.to_string(),
        image_dims: Some((rows, cols)),
    })
}

/// Writes `ds` as an IDX pair. Every feature must be a multiple of 1/255.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let dim = ds.feature_dim();
    let (rows, cols) = ds.image_dims.unwrap_or((1, dim));
    if rows * cols != dim {
        return Err(DatasetError::Unwritable(format!(
            "image dims {rows}x{cols} do not match feature length {dim}"
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for n in [ds.len(), rows, cols] {
        img.extend_from_slice(&(n as u32).to_be_bytes());
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for e in &ds.examples {
        for &f in &e.features {
            let byte = (f * 255.0).round();
            if !(0.0..=255.0).contains(&byte) || f64::from(byte as u8) / 255.0 != f {
                return Err(DatasetError::Unwritable(format!("feature {f} is not a byte / 255")));
            }
            img.push(byte as u8);
        }
        let label = u8::try_from(e.label)
            .map_err(|_| DatasetError::Unwritable(format!("label {} exceeds a byte", e.label)))?;
        lbl.push(label);
    }
    fs::File::create(images)?.write_all(&img)?;
    fs::File::create(labels)?.write_all(&lbl)?;
    Ok(())
}

/// Per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// `client_id,index` CSV rows with header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["client_id", "index"]).map_err(csv_err)?;
        for (k, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                w.serialize((k, i)).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> DatasetError {
    DatasetError::Io(io::Error::other(e))
}

/// Label-sorted shard partition.
///
/// Indices are stable-sorted by label, cut into `shards` contiguous shards of
/// equal size, and a seeded permutation hands `shards_per_client` shards to
/// each client. Each client's indices are returned in ascending order.
pub fn noniid_partition(
    ds: &Dataset,
    clients: usize,
    shards: usize,
    shards_per_client: usize,
    rng: &mut dyn RngCore,
) -> Result<Partition> {
    if clients == 0 || shards == 0 || shards_per_client == 0 {
        return Err(DatasetError::Partition(
            "clients, shards and shards_per_client must be positive".into(),
        ));
    }
    if clients * shards_per_client != shards {
        return Err(DatasetError::Partition(format!(
            "clients ({clients}) x shards_per_client ({shards_per_client}) must equal shards ({shards})"
        )));
    }
    if !ds.len().is_multiple_of(shards) {
        return Err(DatasetError::Partition(format!(
            "{} examples do not split into {shards} equal shards",
            ds.len()
        )));
    }
    let shard_len = ds.len() / shards;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    // Stable, so ties keep original index order.
    order.sort_by_key(|&i| ds.examples[i].label);

    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(rng);
    let clients = shard_ids
        .chunks(shards_per_client)
        .map(|mine| {
            let mut idx: Vec<usize> = mine
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition { clients })
}

/// Gaussian blob generator with fixed class means.
///
/// Means sit at `separation / √2` along distinct coordinate axes, so every
/// pair of means is `separation` apart. Classes beyond the dimension use
/// seeded random directions at the same radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub means: Vec<Vec<f64>>,
}

impl Blobs {
    pub fn new(classes: usize, dim: usize, separation: f64, rng: &mut dyn RngCore) -> Self {
        let radius = separation / std::f64::consts::SQRT_2;
        let means = (0..classes)
            .map(|c| {
                if c < dim {
                    let mut m = vec![0.0; dim];
                    m[c] = radius;
                    m
                } else {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.into_iter().map(|x| radius * x / n).collect()
                }
            })
            .collect();
        Self { means }
    }

    /// `per_class` unit-variance draws around each mean, class-major order.
    pub fn sample(&self, per_class: usize, rng: &mut dyn RngCore, source: &str) -> Dataset {
        let mut examples = Vec::with_capacity(per_class * self.means.len());
        for (label, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                let features = mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + z
                    })
                    .collect();
                examples.push(Example::new(features, label));
            }
        }
        Dataset {
            examples,
            classes: self.means.len(),
            source: source.to_string(),
            image_dims: None,
        }
    }
}

/// Synthetic blob dataset with `per_class` examples of each class.
pub fn synth(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    rng: &mut dyn RngCore,
) -> Dataset {
    let blobs = Blobs::new(classes, dim, separation.max(0.0), rng);
    blobs.sample(per_class, rng, "synth")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 1, 2, 253, 254, 255]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lbl)
    }

    #[test]
    fn parses_fixture_bytes() {
        let (img, lbl) = idx_fixture();
        let ds = parse_idx(&img, &lbl, "img", "lbl").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_dims, Some((1, 3)));
        assert_eq!(ds.examples[0].features, vec![0.0, 1.0 / 255.0, 2.0 / 255.0]);
        assert_eq!(ds.examples[1].features, vec![253.0 / 255.0, 254.0 / 255.0, 1.0]);
        assert_eq!(ds.examples[0].label, 7);
        assert_eq!(ds.examples[1].label, 3);
        assert_eq!(ds.classes, 8);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_count() {
        let (mut img, lbl) = idx_fixture();
        img[3] = 4;
        assert!(matches!(
            parse_idx(&img, &lbl, "i", "l"),
            Err(DatasetError::BadMagic { found: 0x0804, .. })
        ));
        let (img, lbl) = idx_fixture();
        assert!(matches!(
            parse_idx(&img[..img.len() - 1], &lbl, "i", "l"),
            Err(DatasetError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx(&img[..6], &lbl, "i", "l"),
            Err(DatasetError::Truncated { .. })
        ));
        let mut short = lbl.clone();
        short[7] = 1;
        assert!(matches!(
            parse_idx(&img, &short, "i", "l"),
            Err(DatasetError::CountMismatch { images: 2, labels: 1 })
        ));
        assert!(matches!(
            parse_idx(&img, &img, "i", "l"),
            Err(DatasetError::BadMagic { .. })
        ));
    }

    #[test]
    fn idx_round_trip() {
        let (img, lbl) = idx_fixture();
        let ds = parse_idx(&img, &lbl, "a", "b").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), img);
        assert_eq!(fs::read(&lp).unwrap(), lbl);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.examples, ds.examples);
    }

    #[test]
    fn small_partition_is_label_pure_per_shard() {
        let examples = (0..12).map(|i| Example::new(vec![i as f64], i / 6)).collect();
        let ds = Dataset {
            examples,
            classes: 2,
            source: "t".into(),
            image_dims: None,
        };
        // Enumerate outcomes across many seeds: shards are {0..2},{3..5},{6..8},{9..11}.
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let p = noniid_partition(&ds, 2, 4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut counts = Vec::new();
            for idx in &p.clients {
                assert_eq!(idx.len(), 6);
                let ones = idx.iter().filter(|&&i| ds.examples[i].label == 1).count();
                assert!(ones % 3 == 0);
                counts.push(ones);
                for chunk in idx.chunks(3) {
                    assert!(chunk.iter().all(|&i| ds.examples[i].label == ds.examples[chunk[0]].label));
                }
            }
            assert_eq!(counts[0] + counts[1], 6);
            seen.insert(counts);
        }
        // Every client label split (6/0, 3/3, 0/6) is reachable.
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn partition_identity_for_one_client() {
        let ds = synth(3, 2, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let p = noniid_partition(&ds, 1, 6, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.clients, vec![(0..12).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_rejects_indivisible() {
        let ds = synth(2, 2, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(noniid_partition(&ds, 2, 3, 2, &mut rng).is_err());
        assert!(noniid_partition(&ds, 3, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn synth_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(synth(3, 4, 0, 2.0, &mut rng).is_empty());
        let ds = synth(2, 2, 10, 10.0, &mut rng);
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.feature_dim(), 2);
        let b = Blobs::new(4, 2, 3.0, &mut rng);
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d(&b.means[0], &b.means[1]) - 3.0).abs() < 1e-12);
        assert!((b.means[3].iter().map(|x| x * x).sum::<f64>().sqrt() - 3.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn split_is_disjoint() {
        let ds = synth(2, 2, 10, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (a, b) = ds.split(7, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!((a.len(), b.len()), (7, 13));
        for e in &a.examples {
            assert!(!b.examples.contains(e));
        }
    }

    #[test]
    fn partition_csv() {
        let p = Partition {
            clients: vec![vec![0, 2], vec![1]],
        };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "client_id,index\n0,0\n0,2\n1,1\n");
    }
}
