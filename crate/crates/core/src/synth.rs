//! Procedural patch-feature corpora and the binary corpus file format.
//!
//! Every item is a grid of unit-norm feature rows. A grid is built from a few
//! prototype vectors laid out as contiguous runs in raster order, so the
//! number of distinct prototypes (the item's *complexity*) controls how much
//! information the grid carries. Captions list the labels of the prototypes
//! present, sorted.
//!
//! Corpus file layout (little-endian):
//!
//! ```text
//! magic "LVTCORP1" | count u32 | D u32 |
//! per item: id u64 | rows u16 | cols u16 | caption_len u16 | caption u16* | rows*cols*D f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 8] = b"LVTCORP1";

/// Patch features of one image in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<S> {
    pub features: Tensor<S>,
    pub rows: usize,
    pub cols: usize,
    pub image_id: u64,
}

impl<S: Scalar> PatchGrid<S> {
    pub fn new(features: Tensor<S>, rows: usize, cols: usize, image_id: u64) -> Result<Self> {
        if rows * cols == 0 || features.rank() != 2 || features.rows() != rows * cols {
            return Err(Error::invalid(format!(
                "grid {rows}x{cols} does not match features {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("grid features must be finite"));
        }
        Ok(Self {
            features,
            rows,
            cols,
            image_id,
        })
    }

    /// Number of patches `N`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn cast<T: Scalar>(&self) -> PatchGrid<T> {
        PatchGrid {
            features: self.features.cast(),
            rows: self.rows,
            cols: self.cols,
            image_id: self.image_id,
        }
    }
}

/// Unit-norm prototype vectors with one caption label each.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub vectors: Tensor<f32>,
    pub labels: Vec<u16>,
}

impl PrototypeBank {
    /// Draws `size` random unit vectors, resampling any candidate whose cosine
    /// with an accepted prototype reaches `separation`.
    pub fn generate(size: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if size < 1 || dim < 1 {
            return Err(Error::invalid(
                "prototype bank needs size >= 1 and dim >= 1",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while accepted.len() < size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::invalid(format!(
                    "cannot place {size} prototypes in {dim} dims with separation {separation}"
                )));
            }
            let v = unit(
                &(0..dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
            let ok = accepted
                .iter()
                .all(|a| a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() < separation);
            if ok {
                accepted.push(v);
            }
        }
        let data = accepted.iter().flatten().map(|&x| x as f32).collect();
        Ok(Self {
            vectors: Tensor::new(vec![size, dim], data)?,
            labels: (0..size as u16).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Prototype index carrying `label`.
    pub fn index_of(&self, label: u16) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// One generated image plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub grid: PatchGrid<f32>,
    /// Sorted labels of the prototypes present.
    pub caption: Vec<u16>,
    pub complexity: usize,
    /// Prototype index used for every patch, raster order.
    pub assignment: Vec<usize>,
}

/// Layout knobs for [`gen_image`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub rows: usize,
    pub cols: usize,
    pub noise_std: f64,
    /// Probability of one extra run that repeats an already placed prototype.
    pub repeat_prob: f64,
}

/// Generates one grid with `complexity` distinct prototypes.
///
/// The raster sequence is cut into contiguous runs at random positions; the
/// first `complexity` runs carry the chosen prototypes in random order, and
/// with probability `repeat_prob` one more run repeats a chosen prototype
/// (never the one directly before it). Gaussian noise is added and every row
/// renormalised.
pub fn gen_image<R: Rng + ?Sized>(
    bank: &PrototypeBank,
    complexity: usize,
    layout: &LayoutParams,
    image_id: u64,
    rng: &mut R,
) -> Result<SyntheticItem> {
    let n = layout.rows * layout.cols;
    if complexity < 1 || complexity > bank.len() {
        return Err(Error::invalid(format!(
            "complexity {complexity} outside [1, {}]",
            bank.len()
        )));
    }
    if complexity > n {
        return Err(Error::invalid(format!(
            "complexity {complexity} exceeds {n} patches"
        )));
    }
    if layout.noise_std < 0.0 {
        return Err(Error::invalid("noise_std must be >= 0"));
    }
    let mut chosen: Vec<usize> = (0..bank.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(complexity);

    let mut runs = chosen.clone();
    if complexity >= 2 && complexity < n && rng.random::<f64>() < layout.repeat_prob {
        let last = *runs.last().expect("non-empty");
        let candidates: Vec<usize> = chosen.iter().copied().filter(|&p| p != last).collect();
        runs.push(*candidates.choose(rng).expect("complexity >= 2"));
    }

    // Distinct cut points in 1..n split the raster order into runs.
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    cuts.truncate(runs.len() - 1);
    cuts.sort_unstable();
    let mut assignment = Vec::with_capacity(n);
    let mut start = 0;
    for (r, &proto) in runs.iter().enumerate() {
        let end = cuts.get(r).copied().unwrap_or(n);
        assignment.extend(std::iter::repeat_n(proto, end - start));
        start = end;
    }

    let d = bank.dim();
    let mut data = Vec::with_capacity(n * d);
    for &p in &assignment {
        let row: Vec<f64> = bank
            .vectors
            .row(p)
            .iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                x as f64 + layout.noise_std * z
            })
            .collect();
        data.extend(unit(&row).into_iter().map(|x| x as f32));
    }
    let mut caption: Vec<u16> = chosen.iter().map(|&p| bank.labels[p]).collect();
    caption.sort_unstable();
    Ok(SyntheticItem {
        grid: PatchGrid::new(
            Tensor::new(vec![n, d], data)?,
            layout.rows,
            layout.cols,
            image_id,
        )?,
        caption,
        complexity,
        assignment,
    })
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub bank_size: usize,
    pub bank_seed: u64,
    pub separation: f64,
    pub dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub noise_std: f64,
    pub repeat_prob: f64,
    /// Complexity -> relative weight.
    pub complexity_weights: BTreeMap<usize, f64>,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bank_size: 16,
            bank_seed: 7,
            separation: 0.5,
            dim: 16,
            grid_rows: 4,
            grid_cols: 4,
            noise_std: 0.05,
            repeat_prob: 0.5,
            complexity_weights: (2..=8).map(|c| (c, 1.0)).collect(),
            train_count: 2048,
            val_count: 256,
        }
    }
}

impl SynthConfig {
    pub fn layout(&self) -> LayoutParams {
        LayoutParams {
            rows: self.grid_rows,
            cols: self.grid_cols,
            noise_std: self.noise_std,
            repeat_prob: self.repeat_prob,
        }
    }

    pub fn bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::generate(self.bank_size, self.dim, self.separation, self.bank_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.dim == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("dim and grid extents must be positive");
        }
        if self.complexity_weights.is_empty() {
            return bad("complexity_weights is empty");
        }
        for (&c, &w) in &self.complexity_weights {
            if c == 0 || c > self.bank_size || c > self.grid_rows * self.grid_cols {
                return bad(&format!("complexity {c} impossible"));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return bad("complexity weights must be finite and >= 0");
            }
        }
        if self.complexity_weights.values().sum::<f64>() <= 0.0 {
            return bad("complexity weights sum to zero");
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad("noise_std must be >= 0 and repeat_prob in [0, 1]");
        }
        if !(self.separation > -1.0 && self.separation <= 1.0) {
            return bad("separation must lie in (-1, 1]");
        }
        Ok(())
    }

    fn sample_complexity<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.complexity_weights.values().sum();
        let mut u = rng.random::<f64>() * total;
        for (&c, &w) in &self.complexity_weights {
            if u < w {
                return c;
            }
            u -= w;
        }
        *self
            .complexity_weights
            .keys()
            .next_back()
            .expect("non-empty")
    }
}

/// Random stream of item `id` under corpus `seed`.
pub fn item_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates items `ids` in parallel; each item owns its stream.
pub fn gen_items(
    cfg: &SynthConfig,
    bank: &PrototypeBank,
    seed: u64,
    ids: std::ops::Range<u64>,
) -> Result<Vec<SyntheticItem>> {
    cfg.validate()?;
    let layout = cfg.layout();
    ids.into_par_iter()
        .map(|id| {
            let mut rng = item_rng(seed, id);
            let c = cfg.sample_complexity(&mut rng);
            gen_image(bank, c, &layout, id, &mut rng)
        })
        .collect()
}

/// A stored corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: u64,
    pub grid: PatchGrid<f32>,
    pub caption: Vec<u16>,
}

impl From<&SyntheticItem> for CorpusItem {
    fn from(s: &SyntheticItem) -> Self {
        Self {
            id: s.grid.image_id,
            grid: s.grid.clone(),
            caption: s.caption.clone(),
        }
    }
}

/// Serialises items into the corpus format.
pub fn encode_corpus(items: &[CorpusItem]) -> Result<Vec<u8>> {
    let d = items.first().map_or(0, |i| i.grid.dim());
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for it in items {
        if it.grid.dim() != d {
            return Err(Error::invalid("corpus items disagree on feature dimension"));
        }
        let r = u16::try_from(it.grid.rows).map_err(|_| Error::invalid("grid too large"))?;
        let c = u16::try_from(it.grid.cols).map_err(|_| Error::invalid("grid too large"))?;
        let cl = u16::try_from(it.caption.len()).map_err(|_| Error::invalid("caption too long"))?;
        out.extend_from_slice(&it.id.to_le_bytes());
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&cl.to_le_bytes());
        for &t in &it.caption {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for &x in it.grid.features.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, index: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Record {
                index,
                detail: format!("truncated at byte {}", self.buf.len()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, index: usize) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, index)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, index: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, index)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, index: usize) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, index)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses and validates corpus bytes. `expected_dim`, when given, must match
/// the stored feature dimension.
pub fn decode_corpus(bytes: &[u8], expected_dim: Option<usize>) -> Result<Vec<CorpusItem>> {
    if bytes.len() < 16 || &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Format {
            what: "corpus",
            detail: format!(
                "bad magic, expected {:?}",
                std::str::from_utf8(CORPUS_MAGIC).expect("ascii")
            ),
        });
    }
    let mut rd = Reader { buf: bytes, pos: 8 };
    let count = rd.u32(0)? as usize;
    let d = rd.u32(0)? as usize;
    if let Some(e) = expected_dim {
        if count > 0 && e != d {
            return Err(Error::Format {
                what: "corpus",
                detail: format!("feature dimension {d}, config expects {e}"),
            });
        }
    }
    let mut items = Vec::with_capacity(count);
    for index in 0..count {
        let id = rd.u64(index)?;
        let rows = rd.u16(index)? as usize;
        let cols = rd.u16(index)? as usize;
        let cl = rd.u16(index)? as usize;
        if rows * cols == 0 || d == 0 {
            return Err(Error::Record {
                index,
                detail: format!("empty grid {rows}x{cols}x{d}"),
            });
        }
        let caption = (0..cl).map(|_| rd.u16(index)).collect::<Result<Vec<_>>>()?;
        let raw = rd.take(rows * cols * d * 4, index)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Record {
                index,
                detail: format!("non-finite feature value at offset {bad}"),
            });
        }
        let grid = PatchGrid::new(Tensor::new(vec![rows * cols, d], data)?, rows, cols, id)
            .map_err(|e| Error::Record {
                index,
                detail: e.to_string(),
            })?;
        items.push(CorpusItem { id, grid, caption });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format {
            what: "corpus",
            detail: format!("{} trailing bytes", bytes.len() - rd.pos),
        });
    }
    Ok(items)
}

/// Reads and validates a corpus file (for instance precomputed encoder
/// features). Captions may be empty.
pub fn ingest_features(path: &Path, expected_dim: Option<usize>) -> Result<Vec<CorpusItem>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes, expected_dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub train_file: String,
    pub val_file: String,
    pub config: SynthConfig,
}

/// Paths written by [`gen_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `train.lvtc`, `val.lvtc` and `manifest.json` into `dir`. Train ids
/// are `0..train_count`, validation ids follow, so the splits are disjoint.
pub fn gen_corpus(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<CorpusPaths> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bank = cfg.bank()?;
    let n_train = cfg.train_count as u64;
    let train = gen_items(cfg, &bank, seed, 0..n_train)?;
    let val = gen_items(cfg, &bank, seed, n_train..n_train + cfg.val_count as u64)?;
    let paths = CorpusPaths {
        train: dir.join("train.lvtc"),
        val: dir.join("val.lvtc"),
        manifest: dir.join("manifest.json"),
    };
    let conv = |v: &[SyntheticItem]| v.iter().map(CorpusItem::from).collect::<Vec<_>>();
    write_atomic(&paths.train, &encode_corpus(&conv(&train))?)?;
    write_atomic(&paths.val, &encode_corpus(&conv(&val))?)?;
    let manifest = Manifest {
        seed,
        train_count: train.len(),
        val_count: val.len(),
        train_file: "train.lvtc".into(),
        val_file: "val.lvtc".into(),
        config: cfg.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_atomic(&paths.manifest, &json)?;
    Ok(paths)
}

/// Writes via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn bank() -> PrototypeBank {
        PrototypeBank::generate(16, 16, 0.5, 3).unwrap()
    }

    fn layout(noise: f64) -> LayoutParams {
        LayoutParams {
            rows: 4,
            cols: 4,
            noise_std: noise,
            repeat_prob: 0.5,
        }
    }

    #[test]
    fn bank_is_unit_norm_and_separated() {
        let b = bank();
        for i in 0..b.len() {
            let n: f32 = b.vectors.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
            for j in 0..i {
                let c: f32 = b
                    .vectors
                    .row(i)
                    .iter()
                    .zip(b.vectors.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(c < 0.5);
            }
        }
    }

    #[test]
    fn zero_noise_uses_exactly_the_chosen_prototypes() {
        let b = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let it = gen_image(&b, 2, &layout(0.0), 0, &mut rng).unwrap();
        let distinct: BTreeSet<Vec<u32>> = (0..16)
            .map(|i| {
                it.grid
                    .features
                    .row(i)
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            })
            .collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(it.caption.len(), 2);
    }

    #[test]
    fn complexity_one_has_single_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let it = gen_image(&bank(), 1, &layout(0.1), 0, &mut rng).unwrap();
        assert_eq!(it.caption.len(), 1);
        assert!(it.assignment.iter().all(|&p| p == it.assignment[0]));
    }

    #[test]
    fn complexity_beyond_bank_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(gen_image(&bank(), 17, &layout(0.1), 0, &mut rng).is_err());
        assert!(gen_image(&bank(), 0, &layout(0.1), 0, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_item() {
        let b = bank();
        let a = gen_image(&b, 5, &layout(0.2), 3, &mut item_rng(11, 3)).unwrap();
        let c = gen_image(&b, 5, &layout(0.2), 3, &mut item_rng(11, 3)).unwrap();
        assert_eq!(a.grid, c.grid);
        assert_eq!(a.caption, c.caption);
    }

    #[test]
    fn caption_decodes_to_placed_prototypes() {
        let b = bank();
        for id in 0..200 {
            let mut rng = item_rng(1, id);
            let c = 1 + (id as usize % 8);
            let it = gen_image(&b, c, &layout(0.3), id, &mut rng).unwrap();
            let placed: BTreeSet<usize> = it.assignment.iter().copied().collect();
            let from_caption: BTreeSet<usize> =
                it.caption.iter().map(|&l| b.index_of(l).unwrap()).collect();
            assert_eq!(placed, from_caption);
            assert_eq!(it.caption.len(), c);
        }
    }

    #[test]
    fn corrupted_magic_names_expected() {
        let err = decode_corpus(b"NOTMAGIC\0\0\0\0\0\0\0\0", None).unwrap_err();
        assert!(err.to_string().contains("LVTCORP1"), "{err}");
    }

    #[test]
    fn nan_record_reports_index() {
        let b = bank();
        let cfg = SynthConfig::default();
        let items: Vec<CorpusItem> = gen_items(&cfg, &b, 1, 0..3)
            .unwrap()
            .iter()
            .map(CorpusItem::from)
            .collect();
        let mut bytes = encode_corpus(&items).unwrap();
        // Poison the last float of the last record.
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_corpus(&bytes, Some(16)).unwrap_err() {
            Error::Record { index, .. } => assert_eq!(index, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = SynthConfig::default();
        let items: Vec<CorpusItem> = gen_items(&cfg, &bank(), 1, 0..2)
            .unwrap()
            .iter()
            .map(CorpusItem::from)
            .collect();
        let bytes = encode_corpus(&items).unwrap();
        assert!(decode_corpus(&bytes, Some(8)).is_err());
        assert!(decode_corpus(&bytes[..bytes.len() - 3], Some(16)).is_err());
    }
}
