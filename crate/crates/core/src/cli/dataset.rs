//! On-disk datasets: MMV-RAW sample files plus a TSV manifest.
//!
//! MMV-RAW layout, all little-endian:
//!
//! ```text
//! "MMV1"              4 bytes
//! modality            u8   (0 = 2D x-ray, 1 = 3D CT)
//! labels              u8   bit i set when label i is present
//! C, Z, H, W          4 x u32
//! payload             C*Z*H*W x f32
//! crc32(payload)      u32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::tokenizer::{Modality, Volume};
use crate::training::synthetic::{CT_RANGE, LABEL_NAMES, XRAY_RANGE};
use crate::training::{Sample, SampleSource, SyntheticSource};

use super::config::DataConfig;

pub const RAW_MAGIC: &[u8; 4] = b"MMV1";
pub const MANIFEST: &str = "manifest.tsv";

pub fn encode_raw(sample: &Sample) -> Vec<u8> {
    let v = &sample.volume;
    let mut out = Vec::with_capacity(4 + 2 + 16 + v.data().len() * 4 + 4);
    out.extend_from_slice(RAW_MAGIC);
    out.push(v.modality().code());
    out.push(sample.labels);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_raw(bytes: &[u8], id: u64) -> Result<Sample> {
    let bad = |m: String| Error::Format(format!("MMV-RAW: {m}"));
    if bytes.len() < 26 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let modality = Modality::from_code(bytes[4]).map_err(|e| bad(e.to_string()))?;
    let labels = bytes[5];
    let dims: Vec<usize> = bytes[6..22]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("dims overflow".into()))?;
    let expected = n.checked_mul(4).and_then(|p| p.checked_add(26));
    if expected != Some(bytes.len()) {
        return Err(bad(format!("length {} does not match dims {dims:?}", bytes.len())));
    }
    let payload = &bytes[22..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(bad(format!("payload checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let range = if modality.is_2d() { XRAY_RANGE } else { CT_RANGE };
    let volume = Volume::new([dims[0], dims[1], dims[2], dims[3]], data, modality, range)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Sample { id, volume, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub file: String,
    pub modality: Modality,
    pub split: Split,
    pub labels: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

/// `x000012` for 2D, `c000012` for 3D.
pub fn sample_name(modality: Modality, index: usize) -> String {
    let p = if modality.is_2d() { 'x' } else { 'c' };
    format!("{p}{index:06}")
}

/// Inverse of [`sample_name`].
pub fn parse_sample_name(name: &str) -> Result<(Modality, usize)> {
    let bad = || Error::invalid(format!("sample id {name:?}: expected x###### or c######"));
    let m = match name.chars().next() {
        Some('x') => Modality::Xray2d,
        Some('c') => Modality::Ct3d,
        _ => return Err(bad()),
    };
    let index = name[1..].parse().map_err(|_| bad())?;
    Ok((m, index))
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# mmv dataset manifest\n# generator_seed={}\nid\tfile\tmodality\tsplit", self.seed);
        for l in LABEL_NAMES {
            s.push('\t');
            s.push_str(l);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}\t{}", r.id, r.file, r.modality.name(), r.split.name());
            for i in 0..LABEL_NAMES.len() {
                let _ = write!(s, "\t{}", r.labels >> i & 1);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("manifest: {m}"));
        let mut seed = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("generator_seed=") {
                    seed = Some(v.parse().map_err(|_| bad(format!("line {}: bad seed", ln + 1)))?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if !header_seen {
                header_seen = true;
                if f.len() != 4 + LABEL_NAMES.len() || f[0] != "id" {
                    return Err(bad("unexpected header".into()));
                }
                continue;
            }
            if f.len() != 4 + LABEL_NAMES.len() {
                return Err(bad(format!("line {}: expected {} fields", ln + 1, 4 + LABEL_NAMES.len())));
            }
            let modality = match f[2] {
                "2d" => Modality::Xray2d,
                "3d" => Modality::Ct3d,
                m => return Err(bad(format!("line {}: modality {m:?}", ln + 1))),
            };
            let split = match f[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(bad(format!("line {}: split {s:?}", ln + 1))),
            };
            let mut labels = 0u8;
            for (i, v) in f[4..].iter().enumerate() {
                match *v {
                    "0" => {}
                    "1" => labels |= 1 << i,
                    _ => return Err(bad(format!("line {}: label value {v:?}", ln + 1))),
                }
            }
            rows.push(ManifestRow {
                id: f[0].to_string(),
                file: f[1].to_string(),
                modality,
                split,
                labels,
            });
        }
        Ok(Manifest {
            seed: seed.ok_or_else(|| bad("missing generator_seed".into()))?,
            rows,
        })
    }
}

/// Samples of one modality and split of a dataset directory, read lazily.
#[derive(Clone, Debug)]
pub struct DirSource {
    dir: PathBuf,
    modality: Modality,
    rows: Vec<ManifestRow>,
}

impl SampleSource for DirSource {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let row = self
            .rows
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of {}", self.rows.len())))?;
        let (_, n) = parse_sample_name(&row.id)?;
        let s = decode_raw(&fs::read(self.dir.join(&row.file))?, n as u64)?;
        if s.modality() != row.modality || s.labels != row.labels {
            return Err(Error::Format(format!("{} disagrees with the manifest", row.file)));
        }
        Ok(s)
    }

    fn labels(&self, index: usize) -> Result<u8> {
        self.rows
            .get(index)
            .map(|r| r.labels)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of {}", self.rows.len())))
    }
}

/// Train and test sources per modality, plus a dataset identifier for
/// reports.
#[derive(Clone)]
pub struct DataSplits {
    pub name: String,
    pub train_2d: Option<Arc<dyn SampleSource>>,
    pub train_3d: Option<Arc<dyn SampleSource>>,
    pub test_2d: Option<Arc<dyn SampleSource>>,
    pub test_3d: Option<Arc<dyn SampleSource>>,
}

impl DataSplits {
    pub fn source(&self, modality: Modality, split: Split) -> Option<&Arc<dyn SampleSource>> {
        match (modality, split) {
            (Modality::Xray2d, Split::Train) => self.train_2d.as_ref(),
            (Modality::Ct3d, Split::Train) => self.train_3d.as_ref(),
            (Modality::Xray2d, Split::Test) => self.test_2d.as_ref(),
            (Modality::Ct3d, Split::Test) => self.test_3d.as_ref(),
        }
    }
}

fn nonempty(s: Arc<dyn SampleSource>) -> Option<Arc<dyn SampleSource>> {
    (!s.is_empty()).then_some(s)
}

/// The synthetic dataset described by `cfg`, generated on demand. Matches
/// what `gen-data` writes for the same settings.
pub fn synthetic_splits(cfg: &DataConfig) -> DataSplits {
    let make = |m: Modality, n: usize, split: Split| -> Option<Arc<dyn SampleSource>> {
        let train = cfg.train_count(n);
        let (offset, count) = match split {
            Split::Train => (0, train),
            Split::Test => (train, n - train),
        };
        nonempty(Arc::new(SyntheticSource {
            cfg: cfg.synth.clone(),
            seed: cfg.seed,
            modality: m,
            offset,
            count,
        }))
    };
    DataSplits {
        name: format!("synthetic(seed={},n_2d={},n_3d={})", cfg.seed, cfg.n_2d, cfg.n_3d),
        train_2d: make(Modality::Xray2d, cfg.n_2d, Split::Train),
        train_3d: make(Modality::Ct3d, cfg.n_3d, Split::Train),
        test_2d: make(Modality::Xray2d, cfg.n_2d, Split::Test),
        test_3d: make(Modality::Ct3d, cfg.n_3d, Split::Test),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Manifest::from_tsv(&text)
}

/// Location-independent id of a dataset directory: a digest of its
/// manifest plus the generator seed.
pub fn dataset_id(manifest: &Manifest) -> String {
    let d = crate::training::digest(&manifest.to_tsv());
    let hex: String = d[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("manifest-{hex} (generator_seed={})", manifest.seed)
}

pub fn dir_splits(dir: &Path) -> Result<DataSplits> {
    let manifest = read_manifest(dir)?;
    let make = |m: Modality, split: Split| -> Option<Arc<dyn SampleSource>> {
        let rows: Vec<ManifestRow> = manifest
            .rows
            .iter()
            .filter(|r| r.modality == m && r.split == split)
            .cloned()
            .collect();
        nonempty(Arc::new(DirSource {
            dir: dir.to_path_buf(),
            modality: m,
            rows,
        }))
    };
    Ok(DataSplits {
        name: dataset_id(&manifest),
        train_2d: make(Modality::Xray2d, Split::Train),
        train_3d: make(Modality::Ct3d, Split::Train),
        test_2d: make(Modality::Xray2d, Split::Test),
        test_3d: make(Modality::Ct3d, Split::Test),
    })
}

/// Writes every sample of `cfg` as MMV-RAW files plus the manifest.
pub fn write_dataset(dir: &Path, cfg: &DataConfig) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(cfg.n_2d + cfg.n_3d);
    for (m, n) in [(Modality::Xray2d, cfg.n_2d), (Modality::Ct3d, cfg.n_3d)] {
        let train = cfg.train_count(n);
        for i in 0..n {
            let sample = crate::training::synthetic::generate_one(&cfg.synth, cfg.seed, m, i)?;
            let id = sample_name(m, i);
            let file = format!("{id}.mmv");
            write_atomic(&dir.join(&file), &encode_raw(&sample))?;
            rows.push(ManifestRow {
                id,
                file,
                modality: m,
                split: if i < train { Split::Train } else { Split::Test },
                labels: sample.labels,
            });
        }
    }
    let manifest = Manifest { seed: cfg.seed, rows };
    write_atomic(&dir.join(MANIFEST), manifest.to_tsv().as_bytes())?;
    Ok(manifest)
}
