//! Accuracy and localization metrics, ablation harnesses and heatmap export.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{BBox, Region};
use crate::config::RunConfig;
use crate::data::{to_byte, write_image, Sample};
use crate::error::{Error, FileFormat, Result};
use crate::multiscale::{
    argmax, mean_vectors, region_to_window, resize, train_pipeline, LossTerms, MultiScaleModel, PipelineLog,
    Prediction,
};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy needs equal, non-zero lengths (got {} predictions, {} labels)",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Intersection over union of inclusive pixel boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        BBox::new(bx.top, bx.left, bx.bottom, bx.right)?;
    }
    let ih = (a.bottom.min(b.bottom) + 1).saturating_sub(a.top.max(b.top));
    let iw = (a.right.min(b.right) + 1).saturating_sub(a.left.max(b.left));
    let inter = ih * iw;
    Ok(inter as f64 / (a.area() + b.area() - inter) as f64)
}

/// The scale-1 attended box (no margin) in the pixel grid of an `h x w`
/// original image.
pub fn attended_box(model: &MultiScaleModel, pred: &Prediction, h: usize, w: usize) -> BBox {
    let size = model.settings.image_size;
    let stride = model.scales[0].backbone.cumulative_stride();
    let cells = Region::from(pred.per_scale[0].artifacts.bbox);
    let win = region_to_window(&cells, stride, size, size).expect("tight boxes lie inside the feature map");
    let (sy, sx) = (h as f64 / size as f64, w as f64 / size as f64);
    let top = (win.top * sy).floor() as usize;
    let left = (win.left * sx).floor() as usize;
    BBox {
        top,
        left,
        bottom: (((win.bottom + 1.0) * sy).ceil() as usize).clamp(top + 1, h) - 1,
        right: (((win.right + 1.0) * sx).ceil() as usize).clamp(left + 1, w) - 1,
    }
}

/// A box of the same extents as `like`, placed uniformly inside `h x w`.
pub fn random_box(like: &BBox, h: usize, w: usize, rng: &mut impl Rng) -> BBox {
    let top = rng.random_range(0..=h - like.height());
    let left = rng.random_range(0..=w - like.width());
    BBox {
        top,
        left,
        bottom: top + like.height() - 1,
        right: left + like.width() - 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouSummary {
    pub mean: f64,
    pub random_baseline: f64,
    pub per_image: Vec<f64>,
}

const RANDOM_BOX_TAG: u64 = 0x7261_6e64_626f_78;

/// Mean IOU of attended boxes against ground truth, plus the same boxes
/// placed at seeded random positions.
pub fn attention_iou(attended: &[BBox], truth: &[BBox], extents: &[(usize, usize)], seed: u64) -> Result<IouSummary> {
    if attended.is_empty() || attended.len() != truth.len() || truth.len() != extents.len() {
        return Err(Error::invalid("attention IOU needs equal, non-zero numbers of boxes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[RANDOM_BOX_TAG]));
    let mut per_image = Vec::with_capacity(attended.len());
    let mut random = 0.0;
    for ((a, t), &(h, w)) in attended.iter().zip(truth).zip(extents) {
        per_image.push(iou(a, t)?);
        random += iou(&random_box(a, h, w, &mut rng), t)?;
    }
    let n = per_image.len() as f64;
    Ok(IouSummary {
        mean: per_image.iter().sum::<f64>() / n,
        random_baseline: random / n,
        per_image,
    })
}

/// One row per scale plus the ensemble, mirroring a per-scale accuracy table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyRow {
    pub loc: f64,
    pub obj: f64,
    pub avg: f64,
}

/// Evaluation of a multi-scale model on a labelled split.
///
/// `runtime_secs` is informational and is not serialized, so that reports
/// from identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scales: Vec<AccuracyRow>,
    pub ms: AccuracyRow,
    pub mean_iou: f64,
    pub random_iou: f64,
    pub images: usize,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub runtime_secs: Option<f64>,
}

/// Per-image predictions gathered during an evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub iou: IouSummary,
    pub labels: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(model: &MultiScaleModel, samples: &[Sample], config: &RunConfig) -> Result<EvalOutputs> {
    let start = Instant::now();
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.record.label).collect();
    let mut predictions = Vec::with_capacity(samples.len());
    let (mut attended, mut truth, mut extents) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let (_, h, w) = s.image.dims3()?;
        let p = model.predict(&s.image)?;
        attended.push(attended_box(model, &p, h, w));
        truth.push(s.record.bbox);
        extents.push((h, w));
        predictions.push(p);
    }
    let iou = attention_iou(&attended, &truth, &extents, config.seed)?;
    let pick = |scale: usize, f: fn(&crate::multiscale::ScaleOutput) -> &Vec<f64>| -> Vec<Vec<f64>> {
        predictions.iter().map(|p| f(&p.per_scale[scale]).clone()).collect()
    };
    let branches: [fn(&crate::multiscale::ScaleOutput) -> &Vec<f64>; 3] =
        [|o| &o.local_prediction, |o| &o.object_prediction, |o| &o.prediction];
    let row = |preds: [Vec<Vec<f64>>; 3]| -> Result<AccuracyRow> {
        Ok(AccuracyRow {
            loc: accuracy(&preds[0], &labels)?,
            obj: accuracy(&preds[1], &labels)?,
            avg: accuracy(&preds[2], &labels)?,
        })
    };
    let mut scales = Vec::with_capacity(model.scales.len());
    for s in 0..model.scales.len() {
        scales.push(row(branches.map(|f| pick(s, f)))?);
    }
    let ms = row(branches.map(|f| {
        predictions
            .iter()
            .map(|p| mean_vectors(&p.per_scale.iter().map(|o| f(o).clone()).collect::<Vec<_>>()))
            .collect()
    }))?;
    let report = EvalReport {
        scales,
        ms,
        mean_iou: iou.mean,
        random_iou: iou.random_baseline,
        images: samples.len(),
        seed: config.seed,
        config: config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        runtime_secs: Some(start.elapsed().as_secs_f64()),
    };
    Ok(EvalOutputs {
        report,
        iou,
        labels,
        predictions,
    })
}

fn report_err(field: impl Into<String>) -> Error {
    Error::format(FileFormat::Report, field)
}

impl EvalReport {
    /// Accuracy table: one row per branch, one column per scale plus `ms`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("metric");
        for s in 0..self.scales.len() {
            let _ = write!(out, ",scale{}", s + 1);
        }
        out.push_str(",ms\n");
        let fields: [(&str, fn(&AccuracyRow) -> f64); 3] =
            [("acc_loc", |r| r.loc), ("acc_obj", |r| r.obj), ("acc_avg", |r| r.avg)];
        for (name, f) in fields {
            out.push_str(name);
            for r in self.scales.iter().chain(std::iter::once(&self.ms)) {
                let _ = write!(out, ",{}", f(r));
            }
            out.push('\n');
        }
        out
    }

    /// Plain-text summary: scalar results followed by the config echo.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "images = {}", self.images);
        let _ = writeln!(out, "accuracy = {}", self.ms.avg);
        let _ = writeln!(out, "mean_iou = {}", self.mean_iou);
        let _ = writeln!(out, "random_iou = {}", self.random_iou);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        out
    }

    pub fn parse(table: &str, summary: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(table.as_bytes());
        let header = rdr.headers().map_err(|e| report_err(format!("bad table header: {e}")))?.clone();
        let columns = header.len();
        if columns < 3 || &header[0] != "metric" || &header[columns - 1] != "ms" {
            return Err(report_err("bad table header"));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (name, rec) in ["acc_loc", "acc_obj", "acc_avg"].iter().zip(rdr.records()) {
            let rec = rec.map_err(|e| report_err(format!("bad table row: {e}")))?;
            if &rec[0] != *name || rec.len() != columns {
                return Err(report_err(format!("expected row {name}")));
            }
            rows.push(
                rec.iter()
                    .skip(1)
                    .map(|v| v.parse().map_err(|_| report_err(format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?,
            );
        }
        if rows.len() != 3 {
            return Err(report_err("missing table rows"));
        }
        let row = |c: usize| AccuracyRow {
            loc: rows[0][c],
            obj: rows[1][c],
            avg: rows[2][c],
        };
        let scales = (0..columns - 2).map(row).collect();
        let ms = row(columns - 2);

        let mut scalars = std::collections::BTreeMap::new();
        let mut config = Vec::new();
        for line in summary.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| report_err(format!("bad summary line `{line}`")))?;
            match k.strip_prefix("config.") {
                Some(key) => config.push((key.to_string(), v.to_string())),
                None => {
                    scalars.insert(k.to_string(), v.to_string());
                }
            }
        }
        fn get<T: std::str::FromStr>(m: &std::collections::BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .ok_or_else(|| report_err(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| report_err(format!("bad `{k}`")))
        }
        Ok(EvalReport {
            scales,
            ms,
            mean_iou: get(&scalars, "mean_iou")?,
            random_iou: get(&scalars, "random_iou")?,
            images: get(&scalars, "images")?,
            seed: get(&scalars, "seed")?,
            config,
            runtime_secs: None,
        })
    }

    /// Writes `<prefix>.csv` and `<prefix>.txt`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        for (ext, body) in [("csv", self.table_csv()), ("txt", self.summary())] {
            let path = prefix.with_extension(ext);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(prefix: &Path) -> Result<Self> {
        let read = |ext: &str| {
            let path = prefix.with_extension(ext);
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        EvalReport::parse(&read("csv")?, &read("txt")?)
    }
}

fn labels_of(samples: &[Sample]) -> (Vec<Tensor>, Vec<usize>) {
    samples.iter().map(|s| (s.image.clone(), s.record.label)).unzip()
}

/// Trains the full pipeline described by `config` on `train`.
pub fn train_from_config(config: &RunConfig, train: &[Sample], terms: LossTerms) -> Result<(MultiScaleModel, PipelineLog)> {
    let (images, labels) = labels_of(train);
    train_pipeline(
        &images,
        &labels,
        config.scales,
        config.image_size,
        &config.train_config(terms),
        config.seed,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAblation {
    /// Multi-scale accuracy of the local branch when trained on the local loss only.
    pub local_only: f64,
    /// Multi-scale accuracy of the object branch when trained on the object loss only.
    pub object_only: f64,
    /// Multi-scale accuracy of the full model trained on the combined loss.
    pub combined: f64,
}

impl LossAblation {
    pub fn to_csv(&self) -> String {
        format!(
            "variant,accuracy\nlocal_only,{}\nobject_only,{}\ncombined,{}\n",
            self.local_only, self.object_only, self.combined
        )
    }
}

pub fn ablate_losses(config: &RunConfig, train: &[Sample], test: &[Sample]) -> Result<LossAblation> {
    let run = |terms| -> Result<EvalReport> {
        let (model, _) = train_from_config(config, train, terms)?;
        Ok(evaluate(&model, test, config)?.report)
    };
    Ok(LossAblation {
        local_only: run(LossTerms::LOCAL_ONLY)?.ms.loc,
        object_only: run(LossTerms::OBJECT_ONLY)?.ms.obj,
        combined: run(LossTerms::BOTH)?.ms.avg,
    })
}

/// `(n, multi-scale accuracy)` per entry of `n_list`, all else fixed.
pub fn ablate_num_classifiers(config: &RunConfig, n_list: &[usize], train: &[Sample], test: &[Sample]) -> Result<Vec<(usize, f64)>> {
    if n_list.is_empty() {
        return Err(Error::invalid("classifier-count ablation needs at least one n"));
    }
    n_list
        .iter()
        .map(|&n| {
            let cfg = RunConfig {
                n_classifiers: n,
                ..config.clone()
            };
            let (model, _) = train_from_config(&cfg, train, LossTerms::BOTH)?;
            Ok((n, evaluate(&model, test, &cfg)?.report.ms.avg))
        })
        .collect()
}

pub fn curve_csv(header: &str, rows: &[(usize, f64)]) -> String {
    let mut out = format!("{header},accuracy\n");
    for (k, acc) in rows {
        let _ = writeln!(out, "{k},{acc}");
    }
    out
}

/// `(s, accuracy of the ensemble of the first s scales)` for one trained model.
pub fn ablate_scales(model: &MultiScaleModel, test: &[Sample]) -> Result<Vec<(usize, f64)>> {
    let mut per_prefix = vec![Vec::with_capacity(test.len()); model.scales.len()];
    let labels: Vec<usize> = test.iter().map(|s| s.record.label).collect();
    for s in test {
        let p = model.predict(&s.image)?;
        for (k, bucket) in per_prefix.iter_mut().enumerate() {
            let preds: Vec<Vec<f64>> = p.per_scale[..=k].iter().map(|o| o.prediction.clone()).collect();
            bucket.push(mean_vectors(&preds));
        }
    }
    per_prefix
        .iter()
        .enumerate()
        .map(|(k, preds)| Ok((k + 1, accuracy(preds, &labels)?)))
        .collect()
}

/// Min-max normalizes a `1 x h x w` map to `[0, 1]`; a constant map becomes
/// mid-gray 128/255.
pub fn normalize_map(map: &Tensor) -> Result<Tensor> {
    let (c, _, _) = map.dims3()?;
    if c != 1 {
        return Err(Error::invalid("attention maps have one channel"));
    }
    if !map.is_finite() {
        return Err(Error::invalid("attention map has non-finite values"));
    }
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return Ok(map.map(|_| 128.0 / 255.0));
    }
    Ok(map.map(|v| (v - min) / (max - min)))
}

/// Grayscale heat at the image's extents, quantized to 8 bits.
pub fn heat_image(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let up = resize(&normalize_map(map)?, h, w)?;
    Ok(up.map(|v| f64::from(to_byte(v)) / 255.0))
}

/// `0.5 * image + 0.5 * (heat, 0, 0)`; grayscale images are replicated to RGB.
pub fn overlay(image: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if heat.dims3()? != (1, h, w) || !(c == 1 || c == 3) {
        return Err(Error::invalid("overlay needs a 1- or 3-channel image and a matching heat plane"));
    }
    Ok(Tensor::from_fn3(3, h, w, |k, i, j| {
        let base = 0.5 * image.at3(if c == 1 { 0 } else { k }, i, j);
        if k == 0 {
            base + 0.5 * heat.at3(0, i, j)
        } else {
            base
        }
    }))
}

/// Writes the upsampled raw map as P5 and the red overlay as P6.
pub fn export_heatmap(image: &Tensor, map: &Tensor, raw_path: &Path, overlay_path: &Path) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    let heat = heat_image(map, h, w)?;
    write_image(raw_path, &heat)?;
    write_image(overlay_path, &overlay(image, &heat)?)
}
