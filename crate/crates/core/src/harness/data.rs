//! Desk-scale datasets: two synthetic generators and two file formats.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{contract_err, Error, Result};
use crate::rng::{rng_for, stream, Rng};
use crate::ClassId;

/// One labelled input of shape `[c×h×w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticKind {
    /// Gaussian blobs centred on random orthonormal directions of
    /// `R^dims`; samples are shaped `[dims×1×1]`.
    Blobs { dims: usize },
    /// Oriented sinusoidal textures with a random phase per sample.
    Patches { shape: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Blob centre distance from the origin, or texture amplitude.
    pub separation: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.8;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return contract_err(format!("need at least 2 classes, got {}", spec.classes));
    }
    if spec.samples_per_class < 5 {
        return contract_err(format!(
            "need at least 5 samples per class, got {}",
            spec.samples_per_class
        ));
    }
    let mut rng = rng_for(spec.seed, &[stream::DATA]);
    let (input_shape, per_class) = match spec.kind {
        SyntheticKind::Blobs { dims } => ([dims, 1, 1], blobs(dims, spec, &mut rng)?),
        SyntheticKind::Patches { shape } => (shape, patches(shape, spec, &mut rng)?),
    };
    Ok(split(input_shape, per_class, spec.seed))
}

fn noise(rng: &mut Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn blobs(dims: usize, spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Vec<Tensor>>> {
    if dims < spec.classes {
        return contract_err(format!(
            "blobs need dims >= classes for orthogonal centres ({dims} < {})",
            spec.classes
        ));
    }
    // Gram-Schmidt over Gaussian draws.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while dirs.len() < spec.classes {
        let mut v: Vec<f64> = (0..dims).map(|_| noise(rng, 1.0)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
        }
    }
    Ok(dirs
        .iter()
        .map(|dir| {
            (0..spec.samples_per_class)
                .map(|_| {
                    let data = dir
                        .iter()
                        .map(|&u| spec.separation * u + noise(rng, spec.noise))
                        .collect();
                    Tensor::new(vec![dims, 1, 1], data).expect("shape")
                })
                .collect()
        })
        .collect())
}

fn patches(shape: [usize; 3], spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Vec<Tensor>>> {
    let [c, h, w] = shape;
    if c == 0 || h == 0 || w == 0 {
        return contract_err(format!("patch shape {shape:?} has a zero dimension"));
    }
    let orientations = spec.classes.div_ceil(2);
    let size = h.max(w) as f64;
    let mut out = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let theta = PI * (class % orientations) as f64 / orientations as f64;
        let freq = if class / orientations == 0 { 1.5 } else { 3.0 };
        let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let (kx, ky) = (
            2.0 * PI * freq * theta.cos() / size,
            2.0 * PI * freq * theta.sin() / size,
        );
        let samples = (0..spec.samples_per_class)
            .map(|_| {
                let phase = rng.random_range(0.0..2.0 * PI);
                let mut data = Vec::with_capacity(c * h * w);
                for &g in &gains {
                    for y in 0..h {
                        for x in 0..w {
                            let s = (kx * x as f64 + ky * y as f64 + phase).cos();
                            data.push(spec.separation * g * s + noise(rng, spec.noise));
                        }
                    }
                }
                Tensor::new(vec![c, h, w], data).expect("shape")
            })
            .collect();
        out.push(samples);
    }
    Ok(out)
}

/// Per-class seeded shuffle, then the first 80% train and the rest test.
fn split(input_shape: [usize; 3], per_class: Vec<Vec<Tensor>>, seed: u64) -> Dataset {
    let num_classes = per_class.len();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut inputs) in per_class.into_iter().enumerate() {
        let mut rng = rng_for(seed, &[stream::DATA, 1 + label as u64]);
        inputs.shuffle(&mut rng);
        let n_train = ((inputs.len() as f64) * TRAIN_FRACTION).round() as usize;
        for (i, input) in inputs.into_iter().enumerate() {
            let s = Sample { input, label };
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Dataset {
        input_shape,
        num_classes,
        train,
        test,
    }
}

fn group_by_label(rows: Vec<(i64, Tensor)>) -> Vec<Vec<Tensor>> {
    let mut by: BTreeMap<i64, Vec<Tensor>> = BTreeMap::new();
    for (l, t) in rows {
        by.entry(l).or_default().push(t);
    }
    by.into_values().collect()
}

/// Reads vector data as CSV rows `label,feat_0,…,feat_{D−1}`. A header row
/// is skipped when its first field is not an integer. Labels are remapped
/// to `0..K` in ascending order.
pub fn load_csv(path: &Path, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut dims = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let first = fields.next().unwrap_or_default().trim();
        let Ok(label) = first.parse::<i64>() else {
            if i == 0 {
                continue;
            }
            return Err(parse_err(i + 1, format!("bad label `{first}`")));
        };
        let feats = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        if feats.is_empty() || *dims.get_or_insert(feats.len()) != feats.len() {
            return Err(parse_err(
                i + 1,
                format!("expected {} features", dims.unwrap_or(0)),
            ));
        }
        rows.push((label, Tensor::new(vec![feats.len(), 1, 1], feats)?));
    }
    let Some(d) = dims else {
        return Err(parse_err(1, "no data rows".into()));
    };
    finish_loaded([d, 1, 1], group_by_label(rows), seed)
}

fn finish_loaded(shape: [usize; 3], per_class: Vec<Vec<Tensor>>, seed: u64) -> Result<Dataset> {
    if per_class.len() < 2 {
        return contract_err("dataset needs at least 2 classes");
    }
    if let Some(small) = per_class.iter().position(|v| v.len() < 5) {
        return contract_err(format!("class #{small} has fewer than 5 samples"));
    }
    Ok(split(shape, per_class, seed))
}

pub const EXDS_MAGIC: &[u8; 4] = b"EXDS";

/// Image container: `EXDS`, `u32` count, `u32` c, h, w, then per sample a
/// `u32` label and `c·h·w` `f32` values, little-endian.
pub fn write_exds<W: Write>(mut w: W, shape: [usize; 3], samples: &[Sample]) -> Result<()> {
    w.write_all(EXDS_MAGIC)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in samples {
        w.write_all(&(s.label as u32).to_le_bytes())?;
        for &v in s.input.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_exds<R: Read>(mut r: R) -> Result<([usize; 3], Vec<Sample>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EXDS_MAGIC {
        return contract_err(format!("bad dataset magic {magic:?}"));
    }
    let mut u = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let count = u()? as usize;
    let shape = [u()? as usize, u()? as usize, u()? as usize];
    let numel = shape.iter().product::<usize>();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let label = u32::from_le_bytes(b) as usize;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        samples.push(Sample {
            input: Tensor::new(shape.to_vec(), data)?,
            label,
        });
    }
    Ok((shape, samples))
}

/// Loads an `EXDS` file and splits it 80/20 per class.
pub fn load_exds(path: &Path, seed: u64) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let (shape, samples) = read_exds(std::io::BufReader::new(file))?;
    let rows = samples
        .into_iter()
        .map(|s| (s.label as i64, s.input))
        .collect();
    finish_loaded(shape, group_by_label(rows), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind, separation: f64) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            classes: 3,
            samples_per_class: 20,
            separation,
            noise: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn split_is_80_20_and_seeded() {
        let d = generate_synthetic(&spec(SyntheticKind::Blobs { dims: 4 }, 3.0)).unwrap();
        assert_eq!(d.train.len(), 48);
        assert_eq!(d.test.len(), 12);
        assert_eq!(d.input_shape, [4, 1, 1]);
        assert_eq!(
            d,
            generate_synthetic(&spec(SyntheticKind::Blobs { dims: 4 }, 3.0)).unwrap()
        );
        let p =
            generate_synthetic(&spec(SyntheticKind::Patches { shape: [2, 5, 5] }, 1.0)).unwrap();
        assert_eq!(p.train[0].input.shape(), &[2, 5, 5]);
        assert_eq!(
            p,
            generate_synthetic(&spec(SyntheticKind::Patches { shape: [2, 5, 5] }, 1.0)).unwrap()
        );
    }

    #[test]
    fn generator_preconditions() {
        let mut s = spec(SyntheticKind::Blobs { dims: 4 }, 1.0);
        s.samples_per_class = 4;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(SyntheticKind::Blobs { dims: 4 }, 1.0);
        s.classes = 1;
        assert!(generate_synthetic(&s).is_err());
        assert!(generate_synthetic(&spec(SyntheticKind::Blobs { dims: 2 }, 1.0)).is_err());
    }

    #[test]
    fn exds_roundtrip_is_f32() {
        let d =
            generate_synthetic(&spec(SyntheticKind::Patches { shape: [1, 3, 3] }, 1.0)).unwrap();
        let mut buf = Vec::new();
        write_exds(&mut buf, d.input_shape, &d.train).unwrap();
        assert_eq!(&buf[..4], b"EXDS");
        assert_eq!(buf.len(), 4 + 16 + d.train.len() * (4 + 9 * 4));
        let (shape, back) = read_exds(&buf[..]).unwrap();
        assert_eq!(shape, [1, 3, 3]);
        for (a, b) in back.iter().zip(&d.train) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.input.data().iter().zip(b.input.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut text = String::from("label,feat_0,feat_1\n");
        for i in 0..10 {
            text.push_str(&format!("7,{i},0.5\n3,0.5,{i}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let d = load_csv(&path, 1).unwrap();
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.input_shape, [2, 1, 1]);
        assert_eq!(d.train.len(), 16);
        // label 3 sorts first
        assert!(d
            .train
            .iter()
            .filter(|s| s.label == 0)
            .all(|s| s.input.data()[0] == 0.5));

        std::fs::write(&path, "1,2,3\n1,x,3\n").unwrap();
        let err = load_csv(&path, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
