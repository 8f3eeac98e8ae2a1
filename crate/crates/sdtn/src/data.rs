//! Hyperspectral cube ingestion, normalization, patch extraction with mirror
//! padding, and the n-per-class train/test split.
//!
//! Input arrays are NPY v1.0 files: the cube as a little-endian f32 or f64
//! array `[H, W, B]`, the label map as a little-endian u16 array `[H, W]`
//! (0 = unlabeled, 1..M = classes). Fortran-order arrays are rejected.

use crate::error::{Result, SdtnError};
use crate::tensor::DenseTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Payload of a parsed NPY file.
pub enum NpyData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U16(Vec<u16>),
}

fn parse_npy_header(header: &str) -> Result<(String, bool, Vec<usize>)> {
    let grab = |key: &str| -> Result<String> {
        let pos = header
            .find(key)
            .ok_or_else(|| SdtnError::Parse(format!("npy header missing {key}")))?;
        Ok(header[pos + key.len()..].to_string())
    };
    let descr_tail = grab("'descr':")?;
    let descr = descr_tail
        .split('\'')
        .nth(1)
        .ok_or_else(|| SdtnError::Parse("malformed descr".into()))?
        .to_string();
    let fortran_tail = grab("'fortran_order':")?;
    let fortran = fortran_tail.trim_start().starts_with("True");
    let shape_tail = grab("'shape':")?;
    let open = shape_tail
        .find('(')
        .ok_or_else(|| SdtnError::Parse("malformed shape".into()))?;
    let close = shape_tail
        .find(')')
        .ok_or_else(|| SdtnError::Parse("malformed shape".into()))?;
    let dims: Vec<usize> = shape_tail[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| SdtnError::Parse(format!("bad shape entry {s:?}")))
        })
        .collect::<Result<_>>()?;
    Ok((descr, fortran, dims))
}

/// Read an NPY v1.x file. Supported dtypes: `<f8`, `<f4`, `<u2`.
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, NpyData)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| SdtnError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic[..6] != NPY_MAGIC {
        return Err(SdtnError::Parse(format!(
            "{} is not an NPY file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 2];
    file.read_exact(&mut len_bytes)?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let header = String::from_utf8_lossy(&header).to_string();
    let (descr, fortran, dims) = parse_npy_header(&header)?;
    if fortran {
        return Err(SdtnError::Parse(format!(
            "{}: fortran-order arrays are not supported",
            path.display()
        )));
    }
    let count: usize = dims.iter().product();
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let expect = |n: usize| -> Result<()> {
        if raw.len() != n {
            Err(SdtnError::Parse(format!(
                "{}: expected {n} payload bytes, found {}",
                path.display(),
                raw.len()
            )))
        } else {
            Ok(())
        }
    };
    let data = match descr.as_str() {
        "<f8" => {
            expect(count * 8)?;
            NpyData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "<f4" => {
            expect(count * 4)?;
            NpyData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "<u2" => {
            expect(count * 2)?;
            NpyData::U16(
                raw.chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => {
            return Err(SdtnError::Parse(format!(
                "{}: unsupported dtype {other:?}",
                path.display()
            )))
        }
    };
    Ok((dims, data))
}

fn write_npy(path: &Path, descr: &str, dims: &[usize], payload: &[u8]) -> Result<()> {
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (16 - unpadded % 16) % 16;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut file = std::fs::File::create(path)?;
    file.write_all(NPY_MAGIC)?;
    file.write_all(&[1, 0])?;
    file.write_all(&(header.len() as u16).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    file.write_all(payload)?;
    Ok(())
}

pub fn write_npy_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_npy(path, "<f8", dims, &payload)
}

pub fn write_npy_u16(path: &Path, dims: &[usize], data: &[u16]) -> Result<()> {
    let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_npy(path, "<u2", dims, &payload)
}

/// A labeled hyperspectral scene: cube `[H, W, B]` plus a label image.
#[derive(Debug, Clone)]
pub struct HsiScene {
    pub cube: DenseTensor,
    /// Row-major H*W labels, 0 = unlabeled.
    pub labels: Vec<u16>,
    pub n_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl HsiScene {
    pub fn new(cube: DenseTensor, labels: Vec<u16>) -> Result<Self> {
        if cube.order() != 3 {
            return Err(SdtnError::Data(format!(
                "cube must be [H, W, B], got {:?}",
                cube.dims()
            )));
        }
        let (h, w) = (cube.dims()[0], cube.dims()[1]);
        if labels.len() != h * w {
            return Err(SdtnError::Data(format!(
                "label image has {} pixels, cube has {}",
                labels.len(),
                h * w
            )));
        }
        let n_classes = labels.iter().copied().max().unwrap_or(0) as usize;
        if n_classes == 0 {
            return Err(SdtnError::Data("scene has no labeled pixels".into()));
        }
        let mut counts = vec![0usize; n_classes + 1];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        for (class, &c) in counts.iter().enumerate().skip(1) {
            if c == 0 {
                return Err(SdtnError::Data(format!(
                    "class {class} has no labeled pixels"
                )));
            }
        }
        cube.check_finite()?;
        Ok(HsiScene {
            cube,
            labels,
            n_classes,
            class_names: None,
        })
    }

    pub fn height(&self) -> usize {
        self.cube.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.cube.dims()[1]
    }

    pub fn bands(&self) -> usize {
        self.cube.dims()[2]
    }

    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width() + col]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Load a scene from NPY files; validates dtype, shape agreement, and an
/// optional declared class count.
pub fn load_scene(cube_path: &Path, labels_path: &Path) -> Result<HsiScene> {
    let (cube_dims, cube_data) = read_npy(cube_path)?;
    if cube_dims.len() != 3 {
        return Err(SdtnError::Data(format!(
            "{}: cube must be 3-d, got {cube_dims:?}",
            cube_path.display()
        )));
    }
    let data: Vec<f64> = match cube_data {
        NpyData::F64(v) => v,
        NpyData::F32(v) => v.into_iter().map(f64::from).collect(),
        NpyData::U16(_) => {
            return Err(SdtnError::Data(format!(
                "{}: cube must be f32 or f64",
                cube_path.display()
            )))
        }
    };
    let cube = DenseTensor::from_dims(&cube_dims, data)?;
    let (label_dims, label_data) = read_npy(labels_path)?;
    let labels = match label_data {
        NpyData::U16(v) => v,
        _ => {
            return Err(SdtnError::Data(format!(
                "{}: labels must be u16",
                labels_path.display()
            )))
        }
    };
    if label_dims.len() != 2 || label_dims[0] != cube_dims[0] || label_dims[1] != cube_dims[1] {
        return Err(SdtnError::Data(format!(
            "label dims {label_dims:?} do not match cube {cube_dims:?}"
        )));
    }
    HsiScene::new(cube, labels)
}

/// Write a scene back out in the documented array formats.
pub fn save_scene(scene: &HsiScene, cube_path: &Path, labels_path: &Path) -> Result<()> {
    write_npy_f64(cube_path, scene.cube.dims(), scene.cube.data())?;
    write_npy_u16(
        labels_path,
        &[scene.height(), scene.width()],
        &scene.labels,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMethod {
    MinMax,
    Standardize,
}

/// Per-band normalization: min-max to [0, 1] (idempotent) or
/// standardization to zero mean, unit variance.
pub fn normalize(scene: &HsiScene, method: NormalizeMethod) -> Result<HsiScene> {
    let (h, w, b) = (scene.height(), scene.width(), scene.bands());
    let mut cube = scene.cube.clone();
    let pixels = h * w;
    for band in 0..b {
        let values: Vec<f64> = (0..pixels).map(|p| cube.data()[p * b + band]).collect();
        match method {
            NormalizeMethod::MinMax => {
                let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let range = max - min;
                if range == 0.0 {
                    // constant band maps to 0
                    for p in 0..pixels {
                        cube.data_mut()[p * b + band] = 0.0;
                    }
                } else {
                    for p in 0..pixels {
                        let v = cube.data()[p * b + band];
                        cube.data_mut()[p * b + band] = (v - min) / range;
                    }
                }
            }
            NormalizeMethod::Standardize => {
                let mean: f64 = values.iter().sum::<f64>() / pixels as f64;
                let var: f64 =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pixels as f64;
                if var == 0.0 {
                    return Err(SdtnError::Data(format!(
                        "band {band} is constant; standardization undefined"
                    )));
                }
                let std = var.sqrt();
                for p in 0..pixels {
                    let v = cube.data()[p * b + band];
                    cube.data_mut()[p * b + band] = (v - mean) / std;
                }
            }
        }
    }
    Ok(HsiScene {
        cube,
        labels: scene.labels.clone(),
        n_classes: scene.n_classes,
        class_names: scene.class_names.clone(),
    })
}

/// Mirror-reflect an index into [0, n): ..., 2, 1, 0 | 0', 1', ... without
/// repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Extract the odd-sized `P x P x B` window centered at (row, col);
/// out-of-bounds pixels are mirror-reflected.
pub fn extract_patch(scene: &HsiScene, row: usize, col: usize, p: usize) -> Result<DenseTensor> {
    if p % 2 == 0 {
        return Err(SdtnError::Value(format!("patch size {p} must be odd")));
    }
    let (h, w, b) = (scene.height(), scene.width(), scene.bands());
    if row >= h || col >= w {
        return Err(SdtnError::Value(format!(
            "patch center ({row}, {col}) out of bounds for {h}x{w} scene"
        )));
    }
    let half = (p / 2) as isize;
    let mut out = Vec::with_capacity(p * p * b);
    for dr in -half..=half {
        let r = reflect(row as isize + dr, h);
        for dc in -half..=half {
            let c = reflect(col as isize + dc, w);
            let base = (r * w + c) * b;
            out.extend_from_slice(&scene.cube.data()[base..base + b]);
        }
    }
    DenseTensor::from_dims(&[p, p, b], out)
}

/// Train/test pixel split: exactly n per class in train, everything else
/// labeled in test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Sample `n_per_class` labeled pixels per class uniformly without
/// replacement; deterministic given the seed.
pub fn make_split(scene: &HsiScene, n_per_class: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = scene.width();
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scene.n_classes + 1];
    for (i, &l) in scene.labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize].push((i / w, i % w));
        }
    }
    let mut train = Vec::new();
    let mut chosen = vec![false; scene.labels.len()];
    for (class, coords) in by_class.iter().enumerate().skip(1) {
        if coords.len() < n_per_class {
            return Err(SdtnError::Data(format!(
                "class {class} has only {} labeled pixels, need {n_per_class}",
                coords.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut rng, coords.len(), n_per_class);
        for idx in picks.iter() {
            let (r, c) = coords[idx];
            chosen[r * w + c] = true;
            train.push((r, c));
        }
    }
    let mut test = Vec::new();
    for (i, &l) in scene.labels.iter().enumerate() {
        if l > 0 && !chosen[i] {
            test.push((i / w, i % w));
        }
    }
    Ok(Split { train, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_scene(h: usize, w: usize, b: usize, classes: u16, seed: u64) -> HsiScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * b).map(|_| rng.gen_range(0.0..10.0)).collect();
        let labels: Vec<u16> = (0..h * w).map(|i| (i as u16 % classes) + 1).collect();
        HsiScene::new(DenseTensor::from_dims(&[h, w, b], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn npy_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let scene = synthetic_scene(8, 8, 4, 3, 1);
        let cube_path = dir.path().join("cube.npy");
        let labels_path = dir.path().join("labels.npy");
        save_scene(&scene, &cube_path, &labels_path).unwrap();
        let loaded = load_scene(&cube_path, &labels_path).unwrap();
        assert_eq!(loaded.cube.data(), scene.cube.data());
        assert_eq!(loaded.labels, scene.labels);
        assert_eq!(loaded.n_classes, 3);
    }

    #[test]
    fn f32_cube_is_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube32.npy");
        let data: Vec<f32> = vec![1.5, 2.5, 3.5, 4.5];
        let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_npy(&path, "<f4", &[2, 2, 1], &payload).unwrap();
        let (dims, parsed) = read_npy(&path).unwrap();
        assert_eq!(dims, vec![2, 2, 1]);
        match parsed {
            NpyData::F32(v) => assert_eq!(v, data),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn fortran_order_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.npy");
        let mut header =
            "{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }".to_string();
        let unpadded = 6 + 2 + 2 + header.len() + 1;
        header.push_str(&" ".repeat((16 - unpadded % 16) % 16));
        header.push('\n');
        let mut bytes = NPY_MAGIC.to_vec();
        bytes.extend([1, 0]);
        bytes.extend((header.len() as u16).to_le_bytes());
        bytes.extend(header.as_bytes());
        bytes.extend(1.0f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(read_npy(&path).is_err());
    }

    #[test]
    fn missing_class_is_error() {
        let cube = DenseTensor::zeros_dims(&[2, 2, 1]).unwrap();
        // class 2 missing while class 3 present
        let labels = vec![1, 1, 3, 3];
        assert!(HsiScene::new(cube, labels).is_err());
    }

    #[test]
    fn minmax_arithmetic_and_idempotence() {
        let cube = DenseTensor::from_dims(&[1, 3, 1], vec![10.0, 15.0, 20.0]).unwrap();
        let scene = HsiScene::new(cube, vec![1, 1, 1]).unwrap();
        let n = normalize(&scene, NormalizeMethod::MinMax).unwrap();
        assert_eq!(n.cube.data(), &[0.0, 0.5, 1.0]);
        let again = normalize(&n, NormalizeMethod::MinMax).unwrap();
        assert_eq!(again.cube.data(), n.cube.data());
    }

    #[test]
    fn minmax_spans_unit_interval_per_band() {
        let scene = synthetic_scene(6, 5, 3, 2, 7);
        let n = normalize(&scene, NormalizeMethod::MinMax).unwrap();
        for band in 0..3 {
            let vals: Vec<f64> = (0..30).map(|p| n.cube.data()[p * 3 + band]).collect();
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, 0.0);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn standardize_constant_band_errors() {
        let cube = DenseTensor::from_dims(&[1, 2, 2], vec![1.0, 5.0, 1.0, 7.0]).unwrap();
        let scene = HsiScene::new(cube, vec![1, 1]).unwrap();
        let err = normalize(&scene, NormalizeMethod::Standardize).unwrap_err();
        assert!(err.to_string().contains("band 0"));
    }

    #[test]
    fn patch_center_and_p1() {
        let scene = synthetic_scene(5, 5, 3, 2, 11);
        let patch = extract_patch(&scene, 2, 3, 1).unwrap();
        assert_eq!(patch.dims(), &[1, 1, 3]);
        let base = (2 * 5 + 3) * 3;
        assert_eq!(patch.data(), &scene.cube.data()[base..base + 3]);
        let patch3 = extract_patch(&scene, 2, 3, 3).unwrap();
        for band in 0..3 {
            assert_eq!(patch3.get(&[1, 1, band]), scene.cube.data()[base + band]);
        }
    }

    #[test]
    fn corner_patch_mirrors() {
        // 4x4 ramp image, single band: value = row*4 + col
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let cube = DenseTensor::from_dims(&[4, 4, 1], data).unwrap();
        let scene = HsiScene::new(cube, vec![1; 16]).unwrap();
        let patch = extract_patch(&scene, 0, 0, 3).unwrap();
        // hand-computed reflection without edge repeat: index -1 maps to 1
        let expected = [
            [5.0, 4.0, 5.0],
            [1.0, 0.0, 1.0],
            [5.0, 4.0, 5.0],
        ];
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(patch.get(&[r, c, 0]), expected[r][c]);
            }
        }
    }

    #[test]
    fn even_patch_rejected() {
        let scene = synthetic_scene(4, 4, 2, 2, 13);
        assert!(extract_patch(&scene, 1, 1, 2).is_err());
        assert!(extract_patch(&scene, 9, 1, 3).is_err());
    }

    #[test]
    fn patch_translation_consistency() {
        let scene = synthetic_scene(8, 8, 2, 2, 17);
        // interior centers shifted identically with the data window
        let a = extract_patch(&scene, 3, 3, 3).unwrap();
        let b = extract_patch(&scene, 4, 4, 3).unwrap();
        for band in 0..2 {
            assert_eq!(a.get(&[2, 2, band]), b.get(&[1, 1, band]));
        }
    }

    #[test]
    fn split_properties() {
        let scene = synthetic_scene(10, 10, 2, 4, 19);
        let split = make_split(&scene, 5, 42).unwrap();
        assert_eq!(split.train.len(), 20);
        assert_eq!(split.test.len(), 80);
        let again = make_split(&scene, 5, 42).unwrap();
        assert_eq!(split, again);
        let other = make_split(&scene, 5, 43).unwrap();
        assert_ne!(split.train, other.train);
        // disjoint and covering
        for coord in &split.train {
            assert!(!split.test.contains(coord));
        }
        assert_eq!(split.train.len() + split.test.len(), scene.labeled_count());
        // exactly n per class
        for class in 1..=4u16 {
            let c = split
                .train
                .iter()
                .filter(|&&(r, col)| scene.label_at(r, col) == class)
                .count();
            assert_eq!(c, 5);
        }
    }

    #[test]
    fn split_full_class_empties_test() {
        let scene = synthetic_scene(4, 4, 1, 4, 23);
        // each class has 4 pixels
        let split = make_split(&scene, 4, 1).unwrap();
        assert!(split.test.is_empty());
        assert_eq!(split.train.len(), 16);
        assert!(make_split(&scene, 5, 1).is_err());
    }
}
