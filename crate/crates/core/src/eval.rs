//! Held-out evaluation: softmax and nearest-neighbour accuracy, mask error,
//! PCA projection of descriptors, and image grids.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generative::tile_mosaic;
use crate::losses::descriptor_norm_cv;
use crate::render::{read_dataset, SamplePair, Split};
use crate::tensor::Tensor;
use crate::trainer::{ConjugateModel, Trainer};

pub const REPORT_FILE: &str = "report.csv";
pub const PROJECTION_FILE: &str = "proj2d.csv";
pub const RECON_GRID_FILE: &str = "recon_grid.png";
pub const MANIFOLD_GRID_FILE: &str = "manifold_grid.png";
pub const RECON_GRID: usize = 8;
pub const MANIFOLD_GRID: usize = 10;
pub const MANIFOLD_SPAN: f64 = 2.0;
const REPORT_HEADER: &str = "run_id,softmax_accuracy,nn_accuracy,mask_mse,train_count,test_count,descriptor_norm_cv";
const INFER_CHUNK: usize = 64;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Label of the gallery entry nearest to `query` in squared Euclidean
/// distance; equal distances resolve to the lowest label.
pub fn nn_classify(gallery: &[(Vec<f64>, usize)], query: &[f64]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (v, label) in gallery {
        if v.len() != query.len() {
            return Err(Error::ShapeMismatch {
                op: "nn_classify",
                left: vec![v.len()],
                right: vec![query.len()],
            });
        }
        let d = sq_dist(v, query);
        best = match best {
            Some((bd, bl)) if bd < d || (bd == d && bl <= *label) => Some((bd, bl)),
            _ => Some((d, *label)),
        };
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| Error::domain("nn_classify", "empty gallery"))
}

/// Principal axes of a descriptor set, eigenvalues descending.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors; the first nonzero coordinate of each is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(data: &[Vec<f64>], out_dims: usize) -> Result<Self> {
        let n = data.len();
        let d = data.first().map_or(0, Vec::len);
        if out_dims == 0 || out_dims > d || n < out_dims + 1 {
            return Err(Error::domain(
                "pca_project",
                format!(
                    "need 1 <= out_dims <= {d} and more than out_dims samples; got out_dims {out_dims}, {n} samples"
                ),
            ));
        }
        if data.iter().any(|r| r.len() != d) {
            return Err(Error::domain("pca_project", "ragged descriptor rows"));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        if cov.trace() <= 0.0 {
            return Err(Error::domain("pca_project", "degenerate input: all samples are equal"));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let mut components = Vec::with_capacity(out_dims);
        let mut eigenvalues = Vec::with_capacity(out_dims);
        for &c in order.iter().take(out_dims) {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            components.push(v);
            eigenvalues.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Mean-centred projection onto the top `out_dims` principal axes.
pub fn pca_project(data: &[Vec<f64>], out_dims: usize) -> Result<Vec<Vec<f64>>> {
    let pca = Pca::fit(data, out_dims)?;
    Ok(data.iter().map(|x| pca.project(x)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub softmax_accuracy: f64,
    pub nn_accuracy: f64,
    /// `confusion[true][predicted]` counts of softmax predictions.
    pub confusion: Vec<Vec<usize>>,
    pub mask_mse: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub descriptor_norm_cv: f64,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "softmax accuracy {:.4}  nn accuracy {:.4}  mask mse {:.5}  (train {}, test {})\nconfusion (rows = true class):\n",
            self.softmax_accuracy, self.nn_accuracy, self.mask_mse, self.train_count, self.test_count
        );
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Everything derived from one pass over the test split.
pub struct Evaluation {
    pub report: EvalReport,
    pub test_descriptors: Vec<Vec<f64>>,
    pub test_categories: Vec<usize>,
    pub test_masks: Vec<(Tensor, Tensor)>,
    pub test_means: Vec<Vec<f64>>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) },
        )
        .0
}

fn check_compatible(model: &ConjugateModel, pairs: &[SamplePair]) -> Result<()> {
    let s = model.resolution();
    let k = model.classes();
    if let Some(p) = pairs.iter().find(|p| p.resolution() != s) {
        return Err(Error::invalid(format!(
            "resolution mismatch: checkpoint {s}, dataset {}",
            p.resolution()
        )));
    }
    let max_cat = pairs.iter().map(|p| p.category).max().unwrap_or(0);
    if max_cat >= k {
        return Err(Error::invalid(format!(
            "class count mismatch: checkpoint {k}, dataset needs {}",
            max_cat + 1
        )));
    }
    Ok(())
}

/// Evaluates on the test split with the train split as NN gallery.
pub fn evaluate(model: &ConjugateModel, pairs: &[SamplePair]) -> Result<Evaluation> {
    check_compatible(model, pairs)?;
    let train: Vec<&SamplePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    let test: Vec<&SamplePair> = pairs.iter().filter(|p| p.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test split"));
    }
    if train.is_empty() {
        return Err(Error::invalid("dataset has no train split for the NN gallery"));
    }
    let k = model.classes();
    let infer = |ps: &[&SamplePair]| {
        let imgs: Vec<&Tensor> = ps.iter().map(|p| &p.o).collect();
        model.infer_all(&imgs, INFER_CHUNK)
    };
    let gallery: Vec<(Vec<f64>, usize)> = infer(&train)?
        .into_iter()
        .zip(&train)
        .map(|(r, p)| (r.descriptor, p.category))
        .collect();
    let results = infer(&test)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut soft_ok, mut nn_ok, mut se) = (0usize, 0usize, 0.0);
    let mut test_masks = Vec::with_capacity(test.len());
    for (r, p) in results.iter().zip(&test) {
        let pred = argmax(&r.logits);
        confusion[p.category][pred] += 1;
        soft_ok += usize::from(pred == p.category);
        nn_ok += usize::from(nn_classify(&gallery, &r.descriptor)? == p.category);
        se += sq_dist(r.mask.data(), p.m.data()) / r.mask.numel() as f64;
        test_masks.push((p.m.clone(), r.mask.clone()));
    }
    let n = test.len() as f64;
    let test_descriptors: Vec<Vec<f64>> = results.iter().map(|r| r.descriptor.clone()).collect();
    let test_means = test
        .iter()
        .map(|p| model.generative.encode_image(&p.o).map(|g| g.mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: EvalReport {
            softmax_accuracy: soft_ok as f64 / n,
            nn_accuracy: nn_ok as f64 / n,
            confusion,
            mask_mse: se / n,
            train_count: train.len(),
            test_count: test.len(),
            descriptor_norm_cv: descriptor_norm_cv(&test_descriptors),
        },
        test_descriptors,
        test_categories: test.iter().map(|p| p.category).collect(),
        test_masks,
        test_means,
    })
}

/// Appends one row; the run id is one past the last row's id.
pub fn append_report(path: &Path, report: &EvalReport) -> Result<u64> {
    let mut next_id = 1;
    if path.exists() {
        let reader = BufReader::new(fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != REPORT_HEADER {
                    return Err(Error::invalid(format!("{} has an unexpected header", path.display())));
                }
                continue;
            }
            if let Some(id) = line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                next_id = next_id.max(id + 1);
            }
        }
    } else {
        fs::write(path, format!("{REPORT_HEADER}\n"))?;
    }
    let mut f = OpenOptions::new().append(true).open(path)?;
    writeln!(
        f,
        "{next_id},{},{},{},{},{},{}",
        report.softmax_accuracy,
        report.nn_accuracy,
        report.mask_mse,
        report.train_count,
        report.test_count,
        report.descriptor_norm_cv
    )?;
    Ok(next_id)
}

pub fn write_projection(path: &Path, points: &[Vec<f64>], categories: &[usize]) -> Result<()> {
    let mut out = String::from("x,y,category\n");
    for (p, c) in points.iter().zip(categories) {
        out.push_str(&format!("{},{},{c}\n", p[0], p[1]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Saves a `[H, W, 3]` tensor with values in `[0, 1]` as an RGB PNG.
pub fn save_hwc_png(t: &Tensor, path: &Path) -> Result<()> {
    let [h, w, 3] = *t.shape() else {
        return Err(Error::invalid(format!("image grid shape {:?}", t.shape())));
    };
    let buf = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::invalid("image buffer size"))?
        .save(path)?;
    Ok(())
}

/// 8x8 grid: each ground-truth mask row is followed by its reconstructions.
pub fn recon_grid(pairs: &[(Tensor, Tensor)], s: usize) -> Tensor {
    let per_row = RECON_GRID;
    let mut tiles = Vec::with_capacity(RECON_GRID * RECON_GRID);
    let blank = Tensor::zeros(&[3, s, s]);
    for r in 0..RECON_GRID / 2 {
        let chunk: Vec<&(Tensor, Tensor)> = pairs.iter().skip(r * per_row).take(per_row).collect();
        for c in 0..per_row {
            tiles.push(chunk.get(c).map_or(blank.clone(), |p| p.0.clone()));
        }
        for c in 0..per_row {
            tiles.push(chunk.get(c).map_or(blank.clone(), |p| p.1.clone()));
        }
    }
    tile_mosaic(&tiles, RECON_GRID)
}

/// Loads a checkpoint, evaluates on a dataset directory and writes all
/// report files into `out_dir`.
pub fn run_eval(checkpoint: &Path, dataset_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    let trainer = Trainer::load(checkpoint)?;
    let pairs = read_dataset(dataset_dir)?;
    let model = &trainer.model;
    let ev = evaluate(model, &pairs)?;
    fs::create_dir_all(out_dir)?;
    append_report(&out_dir.join(REPORT_FILE), &ev.report)?;
    let proj = pca_project(&ev.test_descriptors, 2)?;
    write_projection(&out_dir.join(PROJECTION_FILE), &proj, &ev.test_categories)?;
    let s = model.resolution();
    save_hwc_png(&recon_grid(&ev.test_masks, s), &out_dir.join(RECON_GRID_FILE))?;
    let k = model.generative.config.latent;
    let mut center = vec![0.0; k];
    for m in &ev.test_means {
        for (c, v) in center.iter_mut().zip(m) {
            *c += v / ev.test_means.len() as f64;
        }
    }
    let axes = (0, 1.min(k - 1));
    let manifold = model
        .generative
        .sample_manifold(&center, MANIFOLD_SPAN, MANIFOLD_GRID, axes)?;
    save_hwc_png(&manifold, &out_dir.join(MANIFOLD_GRID_FILE))?;
    Ok(ev.report)
}
