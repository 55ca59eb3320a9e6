//! On-disk formats.
//!
//! Text records are JSONL, one object per line:
//!
//! | file              | fields                                  |
//! |-------------------|-----------------------------------------|
//! | ground truth      | `image_id, object_id, x, y, w, h`       |
//! | proposals / kept  | `image_id, x, y, w, h, score`           |
//! | pairs             | `image_id, i, j, case_id, y`            |
//! | distances         | `image_id, i, j, dist`                  |
//!
//! Binary files are little-endian: a 4-byte magic, a `u32` version, `u32`
//! dimensions, then `f64` values.
//!
//! * feature grid (`PWFG`): `C, H, W`, stride (`f64`), values row-major `C x H x W`.
//! * checkpoint (`PWRN`): `in_channels, width, embedding_dim, roi_size, head`
//!   (`0` = gap, `1` = fc), parameter tensors in declaration order, then the
//!   running means and variances of every normalization layer.
//!
//! A scene corpus is a directory holding `corpus.json` (generator settings
//! and the image list), `gt.jsonl`, `proposals.jsonl` and
//! `features/<image_id>.bin`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embed::{DistanceMatrix, EmbeddingModel, HeadType, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, FeatureGrid};
use crate::pairs::{PairCase, PairLabel, PairSample};
use crate::scene::{GtObject, Scene, SceneConfig, ScoredProposal};

pub const FEATURE_MAGIC: &[u8; 4] = b"PWFG";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRow {
    pub image_id: u64,
    pub object_id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl GtRow {
    pub fn new(image_id: u64, g: &GtObject) -> Self {
        let b = g.bbox;
        GtRow { image_id, object_id: g.object_id, x: b.x(), y: b.y(), w: b.w(), h: b.h() }
    }

    pub fn object(&self) -> Result<GtObject> {
        Ok(GtObject { object_id: self.object_id, bbox: BBox::new(self.x, self.y, self.w, self.h)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub image_id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl From<&ScoredProposal> for ProposalRow {
    fn from(p: &ScoredProposal) -> Self {
        let b = p.bbox;
        ProposalRow { image_id: p.image_id, x: b.x(), y: b.y(), w: b.w(), h: b.h(), score: p.score }
    }
}

impl ProposalRow {
    pub fn proposal(&self) -> Result<ScoredProposal> {
        ScoredProposal::new(self.image_id, BBox::new(self.x, self.y, self.w, self.h)?, self.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub image_id: u64,
    pub i: usize,
    pub j: usize,
    pub case_id: u8,
    pub y: u8,
}

impl From<&PairSample> for PairRow {
    fn from(s: &PairSample) -> Self {
        PairRow { image_id: s.image_id, i: s.index_i, j: s.index_j, case_id: s.label.case.id(), y: s.label.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub image_id: u64,
    pub i: usize,
    pub j: usize,
    pub dist: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = create(path)?;
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON object per non-blank line; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = open(path)?;
    let mut rows = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: k + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Like [`read_jsonl`], converting each row and reporting conversion
/// failures with their line numbers.
fn read_converted<R: DeserializeOwned, T>(path: &Path, convert: impl Fn(&R) -> Result<T>) -> Result<Vec<T>> {
    let rows: Vec<R> = read_jsonl(path)?;
    rows.iter()
        .enumerate()
        .map(|(k, r)| {
            convert(r).map_err(|e| Error::Parse { path: path.into(), line: k + 1, message: e.to_string() })
        })
        .collect()
}

pub fn write_proposals<'a>(path: &Path, props: impl IntoIterator<Item = &'a ScoredProposal>) -> Result<()> {
    write_jsonl(path, props.into_iter().map(ProposalRow::from))
}

pub fn read_proposals(path: &Path) -> Result<Vec<ScoredProposal>> {
    read_converted(path, ProposalRow::proposal)
}

pub fn write_gt<'a>(path: &Path, rows: impl IntoIterator<Item = (u64, &'a GtObject)>) -> Result<()> {
    write_jsonl(path, rows.into_iter().map(|(id, g)| GtRow::new(id, g)))
}

/// Ground truth grouped by image id.
pub fn read_gt(path: &Path) -> Result<BTreeMap<u64, Vec<GtObject>>> {
    let rows: Vec<(u64, GtObject)> = read_converted(path, |r: &GtRow| Ok((r.image_id, r.object()?)))?;
    let mut out: BTreeMap<u64, Vec<GtObject>> = BTreeMap::new();
    for (id, g) in rows {
        out.entry(id).or_default().push(g);
    }
    Ok(out)
}

/// Proposals grouped by image id, keeping file order inside each image.
pub fn group_by_image(props: Vec<ScoredProposal>) -> BTreeMap<u64, Vec<ScoredProposal>> {
    let mut out: BTreeMap<u64, Vec<ScoredProposal>> = BTreeMap::new();
    for p in props {
        out.entry(p.image_id).or_default().push(p);
    }
    out
}

pub fn write_distances<'a>(path: &Path, matrices: impl IntoIterator<Item = &'a DistanceMatrix>) -> Result<()> {
    let rows = matrices
        .into_iter()
        .flat_map(|dm| dm.iter().map(move |(i, j, dist)| DistanceRow { image_id: dm.image_id, i, j, dist }));
    write_jsonl(path, rows)
}

pub fn read_distances(path: &Path) -> Result<BTreeMap<u64, DistanceMatrix>> {
    let rows: Vec<DistanceRow> = read_jsonl(path)?;
    let mut out: BTreeMap<u64, DistanceMatrix> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        out.entry(r.image_id)
            .or_insert_with(|| DistanceMatrix::new(r.image_id))
            .insert(r.i, r.j, r.dist)
            .map_err(|e| Error::Parse { path: path.into(), line: k + 1, message: e.to_string() })?;
    }
    Ok(out)
}

pub fn write_pairs<'a>(path: &Path, samples: impl IntoIterator<Item = &'a PairSample>) -> Result<()> {
    write_jsonl(path, samples.into_iter().map(PairRow::from))
}

/// Pair rows; rows with an unknown case id or a label disagreeing with
/// their case are rejected.
pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>> {
    read_converted(path, |r: &PairRow| {
        let case = PairCase::from_id(r.case_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown case id {}", r.case_id)))?;
        if PairLabel::from_case(case).y != r.y {
            return Err(Error::InvalidConfig(format!("label y={} contradicts case {}", r.y, r.case_id)));
        }
        if r.i == r.j {
            return Err(Error::InvalidConfig(format!("self pair ({}, {})", r.i, r.j)));
        }
        Ok(*r)
    })
}

/// Corpus index stored as `corpus.json` next to the JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub scene_config: SceneConfig,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    /// Feature grid path, relative to the corpus directory.
    pub features: String,
}

pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const GT_FILE: &str = "gt.jsonl";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";

/// Writes `corpus.json`, `gt.jsonl`, `proposals.jsonl` and one
/// `features/<image_id>.bin` per scene into `dir`.
pub fn write_corpus(dir: &Path, cfg: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let rel = format!("features/{:06}.bin", s.image_id);
        write_feature_grid(&dir.join(&rel), &s.features)?;
        images.push(ImageEntry { image_id: s.image_id, width: s.width, height: s.height, features: rel });
    }
    write_gt(&dir.join(GT_FILE), scenes.iter().flat_map(|s| s.gt.iter().map(move |g| (s.image_id, g))))?;
    write_proposals(&dir.join(PROPOSALS_FILE), scenes.iter().flat_map(|s| &s.proposals))?;
    let manifest = CorpusManifest { scene_config: cfg.clone(), images };
    write_json(&dir.join(CORPUS_MANIFEST), &manifest)
}

/// Reads a corpus written by [`write_corpus`]; scenes come back in manifest
/// order with proposals in file order.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Scene>)> {
    let manifest: CorpusManifest = read_json(&dir.join(CORPUS_MANIFEST))?;
    let mut gt = read_gt(&dir.join(GT_FILE))?;
    let mut props = group_by_image(read_proposals(&dir.join(PROPOSALS_FILE))?);
    let mut scenes = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let path = dir.join(&entry.features);
        let scene = Scene {
            image_id: entry.image_id,
            width: entry.width,
            height: entry.height,
            gt: gt.remove(&entry.image_id).unwrap_or_default(),
            proposals: props.remove(&entry.image_id).unwrap_or_default(),
            features: read_feature_grid(&path)?,
        };
        scene.validate().map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
        scenes.push(scene);
    }
    if let Some(id) = gt.keys().chain(props.keys()).next() {
        return Err(Error::Format {
            path: dir.join(CORPUS_MANIFEST),
            message: format!("image {id} has records but no manifest entry"),
        });
    }
    Ok((manifest, scenes))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    let fail = |e: serde_json::Error| Error::Format { path: path.into(), message: e.to_string() };
    serde_json::to_writer_pretty(&mut out, value).map_err(fail)?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })
}

struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        vs.iter().try_for_each(|v| self.inner.write_all(&v.to_le_bytes()))
    }
}

struct BinReader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> BinReader<'_, R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.into(), message: message.into() }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| self.fail("unexpected end of file"))?;
        Ok(buf)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if &self.bytes::<4>()? != magic {
            return Err(self.fail(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        self.bytes::<4>().map(u32::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.bytes::<8>().map(f64::from_le_bytes)).collect()
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            _ => Err(self.fail("trailing bytes")),
        }
    }
}

fn dim(v: usize) -> u32 {
    u32::try_from(v).expect("dimension fits in u32")
}

pub fn write_feature_grid(path: &Path, fg: &FeatureGrid) -> Result<()> {
    let mut w = BinWriter { inner: create(path)? };
    let res: std::io::Result<()> = (|| {
        w.inner.write_all(FEATURE_MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.u32(dim(fg.channels()))?;
        w.u32(dim(fg.height()))?;
        w.u32(dim(fg.width()))?;
        w.f64s(&[fg.stride()])?;
        w.f64s(fg.values())?;
        w.inner.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid> {
    let mut r = BinReader { inner: open(path)?, path };
    r.header(FEATURE_MAGIC)?;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let stride = r.f64s(1)?[0];
    let values = r.f64s(c * h * w)?;
    r.expect_eof()?;
    FeatureGrid::new(c, h, w, stride, values).map_err(|e| r.fail(e.to_string()))
}

pub fn write_checkpoint(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let cfg = model.config();
    let mut w = BinWriter { inner: create(path)? };
    let res: std::io::Result<()> = (|| {
        w.inner.write_all(CHECKPOINT_MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.u32(dim(cfg.in_channels))?;
        w.u32(dim(cfg.width))?;
        w.u32(dim(cfg.embedding_dim))?;
        w.u32(dim(cfg.roi_size))?;
        w.u32(match cfg.head {
            HeadType::Gap => 0,
            HeadType::Fc => 1,
        })?;
        for t in model.tensors().iter().chain(model.running_mean()).chain(model.running_var()) {
            w.f64s(t)?;
        }
        w.inner.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<EmbeddingModel> {
    let mut r = BinReader { inner: open(path)?, path };
    r.header(CHECKPOINT_MAGIC)?;
    let in_channels = r.u32()? as usize;
    let width = r.u32()? as usize;
    let embedding_dim = r.u32()? as usize;
    let roi_size = r.u32()? as usize;
    let head = match r.u32()? {
        0 => HeadType::Gap,
        1 => HeadType::Fc,
        other => return Err(r.fail(format!("unknown head type {other}"))),
    };
    let config = ModelConfig { in_channels, width, embedding_dim, roi_size, head };
    // a fresh model tells us every tensor length
    let template = EmbeddingModel::new(config, 0).map_err(|e| r.fail(e.to_string()))?;
    let mut params = Vec::new();
    for t in template.tensors() {
        params.push(r.f64s(t.len())?);
    }
    let stats = |r: &mut BinReader<_>| -> Result<Vec<Vec<f64>>> {
        template.running_mean().iter().map(|t| r.f64s(t.len())).collect()
    };
    let mean = stats(&mut r)?;
    let var = stats(&mut r)?;
    r.expect_eof()?;
    EmbeddingModel::from_parts(config, params, mean, var).map_err(|e| r.fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(
            &path,
            "{\"image_id\":0,\"x\":0,\"y\":0,\"w\":1,\"h\":1,\"score\":0.5}\n\n{\"image_id\":0,\"x\":0\n",
        )
        .unwrap();
        match read_proposals(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "{\"image_id\":0,\"x\":0,\"y\":0,\"w\":1,\"h\":1,\"score\":1.5}\n").unwrap();
        assert!(matches!(read_proposals(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_proposals(Path::new("/nonexistent/p.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn feature_grid_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let fg = FeatureGrid::new(2, 3, 4, 8.0, (0..24).map(|v| v as f64 * 0.1 - 1.0).collect()).unwrap();
        write_feature_grid(&path, &fg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PWFG");
        assert_eq!(bytes.len(), 4 + 4 * 4 + 8 + 24 * 8);
        assert_eq!(read_feature_grid(&path).unwrap(), fg);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_feature_grid(&path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_feature_grid(&path).is_err());
    }
}
