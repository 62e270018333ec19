//! Manifest, IDX and CSV ingestion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, ImageShape, Split};
use crate::backbone::load_embeddings;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Csv,
    /// Precomputed `CRCLEM1` embedding files with IDX labels.
    Embeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub format: DataFormat,
    pub image_shape: Option<ImageShape>,
    pub class_names: Option<Vec<String>>,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        message: message.into(),
    }
}

impl Manifest {
    /// Parse a `key=value` manifest; relative paths resolve against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut train_images = None;
        let mut train_labels = None;
        let mut test_images = None;
        let mut test_labels = None;
        let mut format = DataFormat::Idx;
        let mut image_shape = None;
        let mut class_names = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_error(path, line_no, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let resolve = |v: &str| base.join(v);
            match key {
                "train_images" => train_images = Some(resolve(value)),
                "train_labels" => train_labels = Some(resolve(value)),
                "test_images" => test_images = Some(resolve(value)),
                "test_labels" => test_labels = Some(resolve(value)),
                "format" => {
                    format = match value {
                        "idx" => DataFormat::Idx,
                        "csv" => DataFormat::Csv,
                        "embeddings" => DataFormat::Embeddings,
                        other => {
                            return Err(parse_error(path, line_no, format!("unknown format {other:?}")))
                        }
                    }
                }
                "image_shape" => {
                    image_shape = Some(
                        ImageShape::parse(value).map_err(|e| parse_error(path, line_no, e.to_string()))?,
                    )
                }
                "class_names" => {
                    class_names = Some(value.split(',').map(|s| s.trim().to_string()).collect())
                }
                other => return Err(parse_error(path, line_no, format!("unknown key {other:?}"))),
            }
        }
        let need = |v: Option<PathBuf>, key: &str| {
            v.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                location: "manifest".into(),
                message: format!("missing required key {key}"),
            })
        };
        Ok(Self {
            train_images: need(train_images, "train_images")?,
            train_labels: need(train_labels, "train_labels")?,
            test_images: need(test_images, "test_images")?,
            test_labels: need(test_labels, "test_labels")?,
            format,
            image_shape,
            class_names,
        })
    }
}

/// A decoded IDX tensor, values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("offset {offset}"),
        message,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(0, "missing IDX magic".into()));
    }
    let type_code = bytes[2];
    let ndim = bytes[3] as usize;
    let width = match type_code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => return Err(fail(2, format!("unsupported IDX type code {t:#04x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail(bytes.len(), "truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("payload is {} bytes, header implies {}", bytes.len() - header, count * width),
        ));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match type_code {
        0x08 => payload.iter().map(|&b| f64::from(b)).collect(),
        0x09 => payload.iter().map(|&b| f64::from(b as i8)).collect(),
        0x0B => payload
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_be_bytes([c[0], c[1]])))
            .collect(),
        0x0C => payload
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        0x0D => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(header + pos * width, "non-finite value".into()));
    }
    Ok(IdxArray { type_code, dims, data })
}

fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut bytes = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("IDX dim {d} too large")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Write unsigned-byte images (`n × h × w`, magic `0x00000803`).
pub fn write_idx_images(path: &Path, n: usize, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * height * width {
        return Err(Error::shape("write_idx_images", n * height * width, pixels.len()));
    }
    write_idx_u8(path, &[n, height, width], pixels)
}

/// Write unsigned-byte labels (magic `0x00000801`).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_idx_u8(path, &[labels.len()], labels)
}

fn read_csv_features(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| parse_error(path, n + 1, e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_error(
                    path,
                    n + 1,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(path, n + 1, "non-finite value"));
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

fn read_text_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| l.trim().parse::<usize>().map_err(|e| parse_error(path, n + 1, e.to_string())))
        .collect()
}

fn idx_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = read_idx(path)?;
    if arr.dims.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("labels must be 1-dimensional, found {:?}", arr.dims),
        });
    }
    arr.data
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("invalid label value {v}"),
                })
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Images as rows plus the image shape implied by the IDX dims, and whether
/// the values are unsigned bytes.
fn idx_images(path: &Path) -> Result<(Matrix, Option<ImageShape>, bool)> {
    let arr = read_idx(path)?;
    let n = *arr.dims.first().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "zero-dimensional image tensor".into(),
    })?;
    let per: usize = arr.dims[1..].iter().product();
    let shape = match arr.dims[1..] {
        [h, w] => Some(ImageShape { height: h, width: w, channels: 1 }),
        [h, w, c] => Some(ImageShape { height: h, width: w, channels: c }),
        _ => None,
    };
    Ok((Matrix::new(n, per, arr.data)?, shape, arr.type_code == 0x08))
}

fn check_rows(images: &Matrix, labels: &[usize], path: &Path) -> Result<()> {
    if images.rows() != labels.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("{} samples but {} labels", images.rows(), labels.len()),
        });
    }
    Ok(())
}

/// Load the dataset a manifest describes. Pixel data is scaled to `[0, 1]`
/// and then standardized with the training split's scalar mean and std.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    for p in [
        &manifest.train_images,
        &manifest.train_labels,
        &manifest.test_images,
        &manifest.test_labels,
    ] {
        if !p.exists() {
            return Err(Error::io(
                p.clone(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "file referenced by manifest not found"),
            ));
        }
    }
    let (mut train_x, mut test_x, mut shape, bytes, standardize) = match manifest.format {
        DataFormat::Idx => {
            let (tr, s, b1) = idx_images(&manifest.train_images)?;
            let (te, _, b2) = idx_images(&manifest.test_images)?;
            (tr, te, s, b1 && b2, true)
        }
        DataFormat::Csv => (
            read_csv_features(&manifest.train_images)?,
            read_csv_features(&manifest.test_images)?,
            None,
            false,
            true,
        ),
        DataFormat::Embeddings => (
            load_embeddings(&manifest.train_images)?,
            load_embeddings(&manifest.test_images)?,
            None,
            false,
            false,
        ),
    };
    let (train_y, test_y) = match manifest.format {
        DataFormat::Csv => (
            read_text_labels(&manifest.train_labels)?,
            read_text_labels(&manifest.test_labels)?,
        ),
        _ => (idx_labels(&manifest.train_labels)?, idx_labels(&manifest.test_labels)?),
    };
    check_rows(&train_x, &train_y, &manifest.train_labels)?;
    check_rows(&test_x, &test_y, &manifest.test_labels)?;
    if train_x.cols() != test_x.cols() {
        return Err(Error::shape("load_dataset", format!("{} test columns", train_x.cols()), test_x.cols()));
    }
    if manifest.image_shape.is_some() {
        shape = manifest.image_shape;
    }
    if let Some(s) = shape {
        if s.len() != train_x.cols() {
            return Err(Error::shape("image_shape", train_x.cols(), s.len()));
        }
    }
    if manifest.format == DataFormat::Embeddings {
        shape = None;
    }

    let num_classes = train_y.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; num_classes];
    train_y.iter().for_each(|&l| present[l] = true);
    let missing: Vec<usize> = (0..num_classes).filter(|&c| !present[c]).collect();
    if !missing.is_empty() || num_classes == 0 {
        return Err(Error::LabelGap { missing });
    }
    if let Some(&bad) = test_y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label { label: bad, classes: num_classes });
    }

    let mut background = 0.0;
    if standardize {
        let (lo, span) = if bytes {
            (0.0, 255.0)
        } else {
            let lo = train_x.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = train_x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi - lo } else { 1.0 })
        };
        let to_unit = |v: f64| (v - lo) / span;
        let n = train_x.data().len().max(1) as f64;
        let mean = train_x.data().iter().map(|&v| to_unit(v)).sum::<f64>() / n;
        let var = train_x.data().iter().map(|&v| (to_unit(v) - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for m in [&mut train_x, &mut test_x] {
            m.data_mut().iter_mut().for_each(|v| *v = (to_unit(*v) - mean) / std);
        }
        background = (to_unit(0.0) - mean) / std;
    }

    let class_names = match manifest.class_names {
        Some(names) if names.len() == num_classes => names,
        Some(names) => {
            return Err(Error::Parse {
                path: manifest_path.to_path_buf(),
                location: "class_names".into(),
                message: format!("{} names for {num_classes} classes", names.len()),
            })
        }
        None => (0..num_classes).map(|c| c.to_string()).collect(),
    };

    Ok(Dataset {
        train: Split { inputs: train_x, labels: train_y },
        test: Split { inputs: test_x, labels: test_y },
        num_classes,
        class_names,
        image_shape: shape,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "train.csv", "0.0,1.0\n1.0,0.0\n0.5,0.5\n0.2,0.9\n");
        write(d, "train_labels.txt", "0\n1\n1\n0\n");
        write(d, "test.csv", "0.1,0.8\n0.9,0.1\n");
        write(d, "test_labels.txt", "0\n1\n");
        let m = write(
            d,
            "data.manifest",
            "# fixture\nformat=csv\ntrain_images=train.csv\ntrain_labels=train_labels.txt\ntest_images=test.csv\ntest_labels=test_labels.txt\n",
        );
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.class_counts(), vec![2, 2]);
        assert_eq!(ds.input_dim(), 2);
        let mean: f64 = ds.train.inputs.data().iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let pixels: Vec<u8> = (0..3 * 2 * 4).map(|i| (i * 10) as u8).collect();
        write_idx_images(&d.join("img"), 3, 2, 4, &pixels).unwrap();
        let raw = fs::read(d.join("img")).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        let arr = read_idx(&d.join("img")).unwrap();
        assert_eq!(arr.dims, vec![3, 2, 4]);
        assert_eq!(arr.data[5], 50.0);

        write_idx_labels(&d.join("lab"), &[0, 1, 0]).unwrap();
        write_idx_images(&d.join("timg"), 1, 2, 4, &pixels[..8]).unwrap();
        write_idx_labels(&d.join("tlab"), &[1]).unwrap();
        let m = write(d, "m", "train_images=img\ntrain_labels=lab\ntest_images=timg\ntest_labels=tlab\n");
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.image_shape, Some(ImageShape { height: 2, width: 4, channels: 1 }));
        assert_eq!(ds.class_counts(), vec![2, 1]);
    }

    #[test]
    fn missing_file_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(
            dir.path(),
            "m",
            "train_images=nope.idx\ntrain_labels=a\ntest_images=b\ntest_labels=c\n",
        );
        let err = load_dataset(&m).unwrap_err();
        assert!(err.to_string().contains("nope.idx"), "{err}");
    }

    #[test]
    fn label_gap_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "x.csv", "1\n2\n3\n");
        write(d, "y.txt", "0\n3\n3\n");
        let m = write(d, "m", "format=csv\ntrain_images=x.csv\ntrain_labels=y.txt\ntest_images=x.csv\ntest_labels=y.txt\n");
        match load_dataset(&m) {
            Err(Error::LabelGap { missing }) => assert_eq!(missing, vec![1, 2]),
            other => panic!("expected label gap, got {other:?}"),
        }
    }

    #[test]
    fn csv_parse_error_has_line() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "x.csv", "1,2\n3,oops\n");
        write(d, "y.txt", "0\n1\n");
        let m = write(d, "m", "format=csv\ntrain_images=x.csv\ntrain_labels=y.txt\ntest_images=x.csv\ntest_labels=y.txt\n");
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn manifest_rejects_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m", "train_images=a\nbogus=1\n");
        let err = Manifest::read(&m).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn truncated_idx() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, [0u8, 0, 8, 1, 0, 0, 0, 5, 1, 2]).unwrap();
        assert!(matches!(read_idx(&p), Err(Error::Parse { .. })));
    }
}
