use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SamplePair, Split};
use crate::camera::CameraMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.jsonl";

/// Rounds to 9 significant decimal digits; idempotent.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    id: usize,
    category: usize,
    pose: [f64; 3],
    light: f64,
    mode: CameraMode,
    split: Split,
    seed: u64,
    o_file: String,
    m_file: String,
}

fn to_png(t: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::invalid(format!("image shape {:?}", t.shape())));
    };
    if c != 3 {
        return Err(Error::invalid(format!("image needs 3 channels, got {c}")));
    }
    let np = h * w;
    let d = t.data();
    let mut buf = Vec::with_capacity(3 * np);
    for px in 0..np {
        for ch in 0..3 {
            buf.push((d[ch * np + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    ImageBuffer::from_raw(w as u32, h as u32, buf).ok_or_else(|| Error::invalid("image buffer size"))
}

fn from_png(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let np = h * w;
    let mut data = vec![0.0; 3 * np];
    for (px, p) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * np + px] = f64::from(p.0[ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("png dimensions are positive")
}

/// Writes `meta.jsonl` plus `<id>_o.png` / `<id>_m.png` per pair.
pub fn write_dataset(pairs: &[SamplePair], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(File::create(dir.join(META_FILE))?);
    for p in pairs {
        let stem = format!("{:06}", p.id);
        let rec = MetaRecord {
            id: p.id,
            category: p.category,
            pose: p.pose.map(round_sig9),
            light: round_sig9(p.light),
            mode: p.mode,
            split: p.split,
            seed: p.seed,
            o_file: format!("{stem}_o.png"),
            m_file: format!("{stem}_m.png"),
        };
        to_png(&p.o)?.save(dir.join(&rec.o_file))?;
        to_png(&p.m)?.save(dir.join(&rec.m_file))?;
        serde_json::to_writer(&mut meta, &rec)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. A directory without a
/// metadata file is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    let meta_path = dir.join(META_FILE);
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} not found", dir.display()),
        )));
    }
    if !meta_path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(&meta_path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| Error::Metadata {
            path: meta_path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let load = |name: &str| -> Result<Tensor> {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::MissingImage(path));
            }
            Ok(from_png(&image::open(&path)?.to_rgb8()))
        };
        let o = load(&rec.o_file)?;
        let m = load(&rec.m_file)?;
        if o.shape() != m.shape() {
            return Err(Error::Metadata {
                path: meta_path.clone(),
                line: i + 1,
                msg: format!("image shapes differ: {:?} vs {:?}", o.shape(), m.shape()),
            });
        }
        pairs.push(SamplePair {
            id: rec.id,
            o,
            m,
            category: rec.category,
            pose: rec.pose,
            light: rec.light,
            mode: rec.mode,
            split: rec.split,
            seed: rec.seed,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_dataset, Modes, RenderConfig};
    use proptest::prelude::*;

    fn small() -> Vec<SamplePair> {
        render_dataset(&RenderConfig {
            seed: 3,
            classes: 2,
            per_class: 3,
            test_per_class: 2,
            resolution: 16,
            modes: Modes::Centered,
            subdivision: 1,
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = small();
        assert_eq!(pairs.len(), 10);
        write_dataset(&pairs, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(
                (a.id, a.category, a.pose, a.light, a.mode, a.split, a.seed),
                (b.id, b.category, b.pose, b.light, b.mode, b.split, b.seed)
            );
            for (x, y) in a.o.data().iter().zip(b.o.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
            for (x, y) in a.m.data().iter().zip(b.m.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("000004_m.png")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::MissingImage(p)) => assert!(p.ends_with("000004_m.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path()).unwrap();
        let meta = dir.path().join(META_FILE);
        let mut text = fs::read_to_string(&meta).unwrap();
        text = text.replacen("\"category\"", "\"categ", 1);
        let lines: Vec<&str> = text.lines().collect();
        let swapped = [lines[1], lines[0]]
            .iter()
            .chain(&lines[2..])
            .copied()
            .collect::<Vec<_>>();
        fs::write(&meta, swapped.join("\n")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Metadata { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
        assert!(read_dataset(&dir.path().join("nope")).is_err());
    }

    proptest! {
        #[test]
        fn sig9_rounding_is_idempotent_and_tight(x in -1e6f64..1e6) {
            let r = round_sig9(x);
            prop_assert_eq!(round_sig9(r), r);
            prop_assume!(x != 0.0);
            prop_assert!(((r - x) / x).abs() <= 5e-9);
        }
    }
}
