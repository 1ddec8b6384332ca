//! Manifest and feature-file ingestion: the boundary where real webly
//! data would enter.
//!
//! A manifest is line-delimited JSON: a header line carrying the class
//! list and split, then one row per recording with
//! `{id, labels, feature_file, n_segments}`. Feature files are binary:
//! magic `WBL1`, u32 row count, u32 dimension, one endianness tag byte
//! (1 = little endian), then row-major little-endian `f64`.
//!
//! Synthetic datasets additionally write a `<manifest>.truth.jsonl`
//! sidecar with ground-truth labels and injected-false-positive marks;
//! the loader picks it up when present so noise analysis keeps working
//! after a round trip. Training never sees those fields either way.

use super::{DataError, Dataset, NoiseFlag, Recording, Result, Split};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 4] = b"WBL1";
const LITTLE_ENDIAN_TAG: u8 = 1;
const MANIFEST_FORMAT: &str = "weblynet-manifest/1";
const VIEW2_FORMAT: &str = "weblynet-view2/1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---- feature files -------------------------------------------------------

/// Writes a `[rows, dim]` matrix (or `[dim]` vector as one row).
pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, dim) = match t.shape() {
        [r, d] => (*r, *d),
        [d] => (1usize, *d),
        other => {
            return Err(DataError::Schema(format!(
                "feature tensors are 1- or 2-dimensional, got {other:?}"
            )))
        }
    };
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&[LITTLE_ENDIAN_TAG])?;
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(io_err(path))?;
    Ok(())
}

/// Reads a feature file back as a `[rows, dim]` tensor.
pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |detail: &str| DataError::BadFeatureFile {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err(path))?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(io_err(path))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err(path))?;
    if tag[0] != LITTLE_ENDIAN_TAG {
        return Err(bad("unsupported endianness tag"));
    }
    if rows == 0 || dim == 0 {
        return Err(bad("empty feature matrix"));
    }
    let mut data = Vec::with_capacity(rows * dim);
    let mut f64buf = [0u8; 8];
    for _ in 0..rows * dim {
        r.read_exact(&mut f64buf).map_err(io_err(path))?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Ok(Tensor::new(vec![rows, dim], data))
}

// ---- manifests -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    classes: Vec<String>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    labels: Vec<String>,
    feature_file: String,
    n_segments: usize,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    id: String,
    true_labels: Vec<String>,
    fp_classes: Vec<String>,
}

fn truth_path(manifest: &Path) -> std::path::PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".truth.jsonl");
    manifest.with_file_name(name)
}

fn features_dir(manifest: &Path) -> std::path::PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    manifest.with_file_name(format!("{stem}_features"))
}

/// Writes a dataset as a manifest plus one feature file per recording
/// (and a truth sidecar when ground-truth labels are present). Output is
/// canonical: loading and re-writing reproduces the same bytes.
pub fn write_dataset(ds: &Dataset, manifest_path: &Path) -> Result<()> {
    ds.validate()?;
    let feat_dir = features_dir(manifest_path);
    std::fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let rel_dir = feat_dir
        .file_name()
        .expect("directory has a name")
        .to_string_lossy()
        .into_owned();

    let file = std::fs::File::create(manifest_path).map_err(io_err(manifest_path))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        classes: ds.class_names.clone(),
        split: ds.split,
    };
    let names = |bits: &[u8]| -> Vec<String> {
        bits.iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(c, _)| ds.class_names[c].clone())
            .collect()
    };
    (|| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &ds.recordings {
            let row = ManifestRow {
                id: r.id.clone(),
                labels: names(&r.labels),
                feature_file: format!("{rel_dir}/{}.wbl", r.id),
                n_segments: r.n_segments(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })()
    .map_err(io_err(manifest_path))?;

    for r in &ds.recordings {
        write_feature_file(&feat_dir.join(format!("{}.wbl", r.id)), &r.view1)?;
    }

    if ds.recordings.iter().any(|r| r.true_labels.is_some()) {
        let tpath = truth_path(manifest_path);
        let file = std::fs::File::create(&tpath).map_err(io_err(&tpath))?;
        let mut w = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            for r in &ds.recordings {
                let Some(truth) = &r.true_labels else { continue };
                let fp_classes = match &r.noise_flags {
                    Some(flags) => flags
                        .iter()
                        .enumerate()
                        .filter(|(_, &f)| f == NoiseFlag::FalsePositive)
                        .map(|(c, _)| ds.class_names[c].clone())
                        .collect(),
                    None => Vec::new(),
                };
                let row = TruthRow {
                    id: r.id.clone(),
                    true_labels: names(truth),
                    fp_classes,
                };
                serde_json::to_writer(&mut w, &row)?;
                w.write_all(b"\n")?;
            }
            w.flush()
        })()
        .map_err(io_err(&tpath))?;
    }
    Ok(())
}

/// Loads a manifest, its feature files, and the truth sidecar if one
/// sits next to it.
pub fn load_manifest(manifest_path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(manifest_path).map_err(io_err(manifest_path))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(io_err(manifest_path))?,
        None => return Err(DataError::Schema("manifest has no header line".into())),
    };
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Schema(format!("bad manifest header: {e}")))?;
    if header.format != MANIFEST_FORMAT {
        return Err(DataError::Schema(format!(
            "unknown manifest format {:?}",
            header.format
        )));
    }
    let class_index: HashMap<&str, usize> = header
        .classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let multi_hot = |names: &[String], id: &str| -> Result<Vec<u8>> {
        let mut bits = vec![0u8; header.classes.len()];
        for n in names {
            match class_index.get(n.as_str()) {
                Some(&c) => bits[c] = 1,
                None => {
                    return Err(DataError::Schema(format!(
                        "recording {id}: label {n:?} is not in the class list"
                    )))
                }
            }
        }
        Ok(bits)
    };

    let mut recordings = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| DataError::Schema(format!("bad manifest row: {e}")))?;
        let labels = multi_hot(&row.labels, &row.id)?;
        let fpath = base.join(&row.feature_file);
        if !fpath.is_file() {
            return Err(DataError::MissingFeatureFile {
                id: row.id,
                path: fpath.display().to_string(),
            });
        }
        let view1 = read_feature_file(&fpath)?;
        if view1.shape()[0] != row.n_segments {
            return Err(DataError::Schema(format!(
                "recording {}: manifest says {} segments, feature file has {}",
                row.id,
                row.n_segments,
                view1.shape()[0]
            )));
        }
        recordings.push(Recording {
            id: row.id,
            view1,
            view2: None,
            labels,
            true_labels: None,
            noise_flags: None,
        });
    }

    let tpath = truth_path(manifest_path);
    if tpath.is_file() {
        let mut by_id: HashMap<String, usize> = HashMap::new();
        for (i, r) in recordings.iter().enumerate() {
            by_id.insert(r.id.clone(), i);
        }
        let file = std::fs::File::open(&tpath).map_err(io_err(&tpath))?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(io_err(&tpath))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TruthRow = serde_json::from_str(&line)
                .map_err(|e| DataError::Schema(format!("bad truth row: {e}")))?;
            let Some(&i) = by_id.get(&row.id) else {
                return Err(DataError::Schema(format!(
                    "truth sidecar mentions unknown recording {}",
                    row.id
                )));
            };
            let truth = multi_hot(&row.true_labels, &row.id)?;
            let fp: HashSet<usize> = row
                .fp_classes
                .iter()
                .map(|n| {
                    class_index.get(n.as_str()).copied().ok_or_else(|| {
                        DataError::Schema(format!("unknown class {n:?} in truth sidecar"))
                    })
                })
                .collect::<Result<_>>()?;
            let flags = (0..header.classes.len())
                .map(|c| {
                    if fp.contains(&c) {
                        NoiseFlag::FalsePositive
                    } else {
                        NoiseFlag::Clean
                    }
                })
                .collect();
            recordings[i].true_labels = Some(truth);
            recordings[i].noise_flags = Some(flags);
        }
    }

    let ds = Dataset {
        recordings,
        class_names: header.classes,
        split: header.split,
    };
    ds.validate()?;
    Ok(ds)
}

// ---- view-2 sidecars -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct View2Header {
    format: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct View2Row {
    id: String,
    feature_file: String,
}

/// Writes every recording's view-2 vector into `dir` plus an index file.
pub fn write_view2_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    let dim = match ds.recordings.iter().find_map(|r| r.view2.as_ref()) {
        Some(v) => v.len(),
        None => return Err(DataError::Schema("dataset has no view-2 features".into())),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let index = dir.join("index.jsonl");
    let file = std::fs::File::create(&index).map_err(io_err(&index))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        serde_json::to_writer(
            &mut w,
            &View2Header {
                format: VIEW2_FORMAT.into(),
                dim,
            },
        )?;
        w.write_all(b"\n")?;
        for r in &ds.recordings {
            serde_json::to_writer(
                &mut w,
                &View2Row {
                    id: r.id.clone(),
                    feature_file: format!("{}.wbl", r.id),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })()
    .map_err(io_err(&index))?;
    for r in &ds.recordings {
        let v = r.view2.as_ref().ok_or_else(|| {
            DataError::Schema(format!("recording {} has no view-2 features", r.id))
        })?;
        write_feature_file(&dir.join(format!("{}.wbl", r.id)), v)?;
    }
    Ok(())
}

/// Attaches previously written view-2 features to a loaded dataset.
pub fn attach_view2_dir(ds: &mut Dataset, dir: &Path) -> Result<()> {
    let index = dir.join("index.jsonl");
    let file = std::fs::File::open(&index).map_err(io_err(&index))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: View2Header = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(io_err(&index))?)
            .map_err(|e| DataError::Schema(format!("bad view-2 header: {e}")))?,
        None => return Err(DataError::Schema("view-2 index has no header".into())),
    };
    if header.format != VIEW2_FORMAT {
        return Err(DataError::Schema(format!(
            "unknown view-2 format {:?}",
            header.format
        )));
    }
    let mut files: HashMap<String, String> = HashMap::new();
    for line in lines {
        let line = line.map_err(io_err(&index))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: View2Row =
            serde_json::from_str(&line).map_err(|e| DataError::Schema(format!("bad view-2 row: {e}")))?;
        files.insert(row.id, row.feature_file);
    }
    for r in &mut ds.recordings {
        let Some(f) = files.get(&r.id) else {
            return Err(DataError::MissingFeatureFile {
                id: r.id.clone(),
                path: index.display().to_string(),
            });
        };
        let t = read_feature_file(&dir.join(f))?;
        if t.shape()[1] != header.dim {
            return Err(DataError::Schema(format!(
                "recording {}: view-2 width {} does not match index dim {}",
                r.id,
                t.shape()[1],
                header.dim
            )));
        }
        r.view2 = Some(t.reshaped(vec![header.dim])?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NoiseModel};

    #[test]
    fn feature_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wbl");
        let t = Tensor::new(vec![3, 4], (0..12).map(|v| (v as f64).sin()).collect());
        write_feature_file(&path, &t).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn manifest_roundtrip_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = dir.path().join("train.jsonl");
        let noise = NoiseModel {
            fp_rate: vec![0.4, 0.0, 0.2],
        };
        let ds = generate_synthetic(15, 3, noise, 77).unwrap();
        write_dataset(&ds, &m1).unwrap();
        let loaded = load_manifest(&m1).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.recordings.iter().zip(&loaded.recordings) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.true_labels, b.true_labels);
            assert_eq!(a.noise_flags, b.noise_flags);
            assert_eq!(a.view1.data(), b.view1.data());
        }
        // write(load(m)) reproduces m byte for byte.
        let m2 = dir.path().join("again.jsonl");
        write_dataset(&loaded, &m2).unwrap();
        let b1 = std::fs::read(&m1).unwrap();
        let b2 = std::fs::read(&m2)
            .map(|b| {
                // Feature paths embed the manifest stem; normalize.
                String::from_utf8(b)
                    .unwrap()
                    .replace("again_features/", "train_features/")
            })
            .unwrap();
        assert_eq!(String::from_utf8(b1).unwrap(), b2);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let ds = Dataset {
            recordings: vec![],
            class_names: vec!["a".into(), "b".into()],
            split: Split::Test,
        };
        write_dataset(&ds, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.class_names, ds.class_names);
    }

    #[test]
    fn long_recording_keeps_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let ds = Dataset {
            recordings: vec![Recording {
                id: "clip111".into(),
                view1: Tensor::zeros(vec![111, 128]),
                view2: None,
                labels: vec![1, 0],
                true_labels: None,
                noise_flags: None,
            }],
            class_names: vec!["a".into(), "b".into()],
            split: Split::Train,
        };
        write_dataset(&ds, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.recordings[0].view1.shape(), &[111, 128]);
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut ds = generate_synthetic(5, 2, NoiseModel::zero(2), 5).unwrap();
        ds.recordings[1].id = ds.recordings[0].id.clone();
        // write_dataset validates, so write manually.
        let feat = dir.path().join("dup_features");
        std::fs::create_dir_all(&feat).unwrap();
        for (i, r) in ds.recordings.iter().enumerate() {
            write_feature_file(&feat.join(format!("f{i}.wbl")), &r.view1).unwrap();
        }
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                classes: ds.class_names.clone(),
                split: Split::Train,
            })
            .unwrap(),
        );
        out.push('\n');
        for (i, r) in ds.recordings.iter().enumerate() {
            out.push_str(
                &serde_json::to_string(&ManifestRow {
                    id: r.id.clone(),
                    labels: vec![ds.class_names[0].clone()],
                    feature_file: format!("dup_features/f{i}.wbl"),
                    n_segments: r.n_segments(),
                })
                .unwrap(),
            );
            out.push('\n');
        }
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::Schema(_))));
    }

    #[test]
    fn missing_feature_file_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                classes: vec!["a".into()],
                split: Split::Train,
            })
            .unwrap(),
        );
        out.push('\n');
        out.push_str(
            &serde_json::to_string(&ManifestRow {
                id: "ghost".into(),
                labels: vec!["a".into()],
                feature_file: "nowhere.wbl".into(),
                n_segments: 4,
            })
            .unwrap(),
        );
        out.push('\n');
        std::fs::write(&path, out).unwrap();
        match load_manifest(&path) {
            Err(DataError::MissingFeatureFile { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("expected missing-feature error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let ds = generate_synthetic(4, 2, NoiseModel::zero(2), 6).unwrap();
        write_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("class_00", "class_zz");
        // Header keeps the replaced name too, so patch only a row.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[0] = lines[0].replace("class_zz", "class_00");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let _ = std::fs::remove_file(truth_path(&path));
        assert!(matches!(load_manifest(&path), Err(DataError::Schema(_))));
    }

    #[test]
    fn view2_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("d.jsonl");
        let mut ds = generate_synthetic(6, 2, NoiseModel::zero(2), 8).unwrap();
        for (i, r) in ds.recordings.iter_mut().enumerate() {
            r.view2 = Some(Tensor::from_vec(vec![i as f64, 1.0, 2.0]));
        }
        write_dataset(&ds, &mpath).unwrap();
        write_view2_dir(&ds, &dir.path().join("v2")).unwrap();
        let mut loaded = load_manifest(&mpath).unwrap();
        attach_view2_dir(&mut loaded, &dir.path().join("v2")).unwrap();
        for (a, b) in ds.recordings.iter().zip(&loaded.recordings) {
            assert_eq!(
                a.view2.as_ref().unwrap().data(),
                b.view2.as_ref().unwrap().data()
            );
        }
    }
}
