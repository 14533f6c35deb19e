//! Evaluation and experiment harness: overall accuracy with a confusion
//! matrix, the deployment-path equivalence check, grayscale attention-map
//! export, and the ablation grid runner.
//!
//! Test images are always scored through the plain single-image path
//! (backbone -> GAP -> classifier); an opt-in flag enables evaluation-time
//! channel attention for ablation only.

use crate::data::{image_tensor, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::{single_branch_forward, Model};
use crate::ops;
use crate::pairing::{Metric, Strategy};
use crate::parallel::map_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{
    self, Architecture, Objective, Representation, TrainConfig, TrainState,
};
use std::path::{Path, PathBuf};

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-time options; the default mirrors deployment exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Apply the per-image channel attention before pooling at test time.
    pub use_eca: bool,
}

/// A standardized, evaluation-ready split.
pub struct PreparedSet<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Standardizes every item of `dataset` with the train-split statistics.
pub fn prepare<T: Scalar>(dataset: &Dataset, stats: &ChannelStats) -> Result<PreparedSet<T>> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot prepare an empty dataset".into()));
    }
    Ok(PreparedSet {
        images: dataset
            .items
            .iter()
            .map(|it| image_tensor(&it.image, stats))
            .collect(),
        labels: dataset.labels(),
        num_classes: dataset.num_classes(),
    })
}

/// Scores one `[1, 3, H, W]` image under the evaluation options.
pub fn score_image<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    opts: &EvalOptions,
) -> Result<Tensor<T>> {
    if !opts.use_eca {
        return single_branch_forward(&model.backbone, &model.classifier, image);
    }
    let f = model.backbone.features(image)?;
    let attended = model.eca.apply(&f)?;
    let pooled = ops::global_average_pool(&attended)?;
    let q = model.classifier.probabilities(&pooled)?;
    let n = model.classifier.num_classes();
    q.reshaped(&[n])
}

/// Accuracy report over a test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn summary(&self) -> String {
        format!(
            "overall accuracy {:.4} over {} items ({} classes)",
            self.overall_accuracy,
            self.total(),
            self.confusion.len()
        )
    }

    /// Confusion matrix as CSV; rows are true classes, columns predictions.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\pred");
        for j in 0..n {
            out.push_str(&format!(",{}", j));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every test image through the single-image path and assembles the
/// confusion matrix. Items are scored independently (in parallel); counting
/// is order-normalized.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &PreparedSet<T>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if set.images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty test set".into()));
    }
    let preds: Vec<Result<usize>> = map_indexed(set.images.len(), |i| {
        let q = score_image(model, &set.images[i], opts)?;
        Ok(argmax_lowest(q.data()))
    });
    let n = set.num_classes;
    let mut confusion = vec![vec![0usize; n]; n];
    for (pred, &label) in preds.into_iter().zip(&set.labels) {
        confusion[label][pred?] += 1;
    }
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        overall_accuracy: correct as f64 / set.images.len() as f64,
        confusion,
        per_class_accuracy,
    })
}

/// Result of comparing the evaluator's path against the canonical
/// single-branch forward on the same weights.
#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub equivalent: bool,
    pub detail: String,
}

/// Checks that the deployed path is exactly the plain single-image forward:
/// for every probe image, the evaluator's scores must be bitwise identical to
/// `single_branch_forward` on the same weight tensors. Enabling
/// evaluation-time attention is the intended negative control.
pub fn inference_equivalence_check<T: Scalar>(
    model: &Model<T>,
    probe: &PreparedSet<T>,
    opts: &EvalOptions,
) -> Result<EquivalenceReport> {
    for (i, image) in probe.images.iter().enumerate() {
        let via_evaluator = score_image(model, image, opts)?;
        let canonical = single_branch_forward(&model.backbone, &model.classifier, image)?;
        if via_evaluator.data() != canonical.data() {
            return Ok(EquivalenceReport {
                equivalent: false,
                detail: format!(
                    "probe {} diverges: evaluator path differs from the single-branch forward \
                     (max |diff| {:.3e}); evaluation-time attention is {}",
                    i,
                    via_evaluator.max_abs_diff(&canonical),
                    if opts.use_eca { "on" } else { "off" }
                ),
            });
        }
    }
    Ok(EquivalenceReport {
        equivalent: true,
        detail: format!(
            "{} probe images score bitwise-identically through both paths",
            probe.images.len()
        ),
    })
}

// ── attention-map export ─────────────────────────────────────────────────

fn channel_weighted_norm<T: Scalar>(f: &Tensor<T>, weights: &Tensor<T>) -> Result<Vec<f64>> {
    let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    debug_assert_eq!(b, 1);
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for ci in 0..c {
        let a = weights.data()[ci].as_f64();
        let slice = &f.data()[ci * plane..(ci + 1) * plane];
        for (m, &v) in map.iter_mut().zip(slice) {
            let weighted = a * v.as_f64();
            *m += weighted * weighted;
        }
    }
    for m in map.iter_mut() {
        *m = m.sqrt();
    }
    Ok(map)
}

fn normalize_unit(map: &mut [f64]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        for v in map.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in map.iter_mut() {
            *v = 0.0;
        }
    }
}

fn write_map(map: &[f64], h: usize, w: usize, stem: &Path) -> Result<Vec<PathBuf>> {
    let png_path = stem.with_extension("png");
    let csv_path = stem.with_extension("csv");
    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            gray.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    gray.save(&png_path)
        .map_err(|e| Error::Data(format!("cannot write '{}': {}", png_path.display(), e)))?;
    let mut csv = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| map[y * w + x].to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(vec![png_path, csv_path])
}

/// Writes the channel-weighted spatial response maps of a pair: each image's
/// self map (attention-weighted L2 norm over channels, normalized to [0,1])
/// and the concatenated-feature map, as grayscale PNG plus raw CSV at the
/// feature map's spatial extents.
pub fn export_attention_maps<T: Scalar>(
    model: &Model<T>,
    img1: &Tensor<T>,
    img2: &Tensor<T>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let f1 = model.backbone.features(img1)?;
    let f2 = model.backbone.features(img2)?;
    let mut written = Vec::new();
    for (name, f) in [("self1", &f1), ("self2", &f2)] {
        let a = model.eca.weights(f)?;
        let (h, w) = (f.shape()[2], f.shape()[3]);
        let mut map = channel_weighted_norm(f, &a)?;
        normalize_unit(&mut map);
        written.extend(write_map(&map, h, w, &out_dir.join(name))?);
    }
    let cat = ops::concat_channels(&f1, &f2)?;
    let a = model.mutual.eca().weights(&cat)?;
    let (h, w) = (cat.shape()[2], cat.shape()[3]);
    let mut map = channel_weighted_norm(&cat, &a)?;
    normalize_unit(&mut map);
    written.extend(write_map(&map, h, w, &out_dir.join("mutual"))?);
    Ok(written)
}

// ── ablation harness ─────────────────────────────────────────────────────

/// One grid row: a named configuration delta over the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub id: String,
    pub section: String,
    pub architecture: Architecture,
    pub representation: Representation,
    pub objective: Objective,
    pub metric: Metric,
    pub strategy: Strategy,
    pub lambda: f64,
    pub use_eca: bool,
}

impl AblationRow {
    fn pcnet(id: &str, section: &str, base: &TrainConfig) -> Self {
        AblationRow {
            id: id.to_string(),
            section: section.to_string(),
            architecture: Architecture::Multi,
            representation: Representation::Both,
            objective: Objective::CrossEntropyRanking,
            metric: base.metric,
            strategy: base.strategy,
            lambda: base.lambda,
            use_eca: true,
        }
    }

    /// The base config with this row's toggles applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        config.architecture = self.architecture;
        config.representation = self.representation;
        config.objective = self.objective;
        config.metric = self.metric;
        config.strategy = self.strategy;
        config.lambda = self.lambda;
        config.use_eca = self.use_eca;
        config
    }
}

/// The default grid: the five component rows, the three selection metrics,
/// the four pair-construction strategies, the five-point lambda sweep, and a
/// plain no-attention single-branch row as an extra reference.
pub fn default_grid(base: &TrainConfig) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    rows.push(AblationRow {
        id: "table3/baseline".into(),
        section: "table3".into(),
        architecture: Architecture::Single,
        representation: Representation::SelfOnly,
        objective: Objective::CrossEntropy,
        metric: base.metric,
        strategy: base.strategy,
        lambda: base.lambda,
        use_eca: true,
    });
    rows.push(AblationRow {
        id: "table3/multi1".into(),
        section: "table3".into(),
        architecture: Architecture::Multi,
        representation: Representation::SelfOnly,
        objective: Objective::CrossEntropy,
        metric: base.metric,
        strategy: base.strategy,
        lambda: base.lambda,
        use_eca: true,
    });
    rows.push(AblationRow {
        id: "table3/multi2".into(),
        section: "table3".into(),
        architecture: Architecture::Multi,
        representation: Representation::MutualOnly,
        objective: Objective::CrossEntropy,
        metric: base.metric,
        strategy: base.strategy,
        lambda: base.lambda,
        use_eca: true,
    });
    rows.push(AblationRow {
        id: "table3/multi3".into(),
        section: "table3".into(),
        architecture: Architecture::Multi,
        representation: Representation::Both,
        objective: Objective::CrossEntropy,
        metric: base.metric,
        strategy: base.strategy,
        lambda: base.lambda,
        use_eca: true,
    });
    rows.push(AblationRow::pcnet("table3/pcnet", "table3", base));

    for metric in [Metric::Random, Metric::Cosine, Metric::Euclidean] {
        let mut row = AblationRow::pcnet(&format!("table4/{}", metric), "table4", base);
        row.metric = metric;
        rows.push(row);
    }
    for strategy in [
        Strategy::RandomRandom,
        Strategy::SimilarRandom,
        Strategy::SimilarDifferent,
        Strategy::SimilarSimilar,
    ] {
        let mut row = AblationRow::pcnet(&format!("table5/{}", strategy), "table5", base);
        row.strategy = strategy;
        rows.push(row);
    }
    for lambda in [0.5, 0.8, 1.0, 1.2, 1.5] {
        let mut row = AblationRow::pcnet(&format!("table6/lambda-{}", lambda), "table6", base);
        row.lambda = lambda;
        rows.push(row);
    }

    rows.push(AblationRow {
        id: "reference/no-attention".into(),
        section: "reference".into(),
        architecture: Architecture::Single,
        representation: Representation::SelfOnly,
        objective: Objective::CrossEntropy,
        metric: base.metric,
        strategy: base.strategy,
        lambda: base.lambda,
        use_eca: false,
    });
    rows
}

/// Outcome of one grid row; a failed run keeps its error and NaN numbers so
/// the remaining rows still run.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub oa: f64,
    pub final_l_c: f64,
    pub final_l_r: f64,
    pub error: Option<String>,
}

impl AblationOutcome {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.row.id,
            self.row.architecture,
            self.row.representation,
            self.row.objective,
            self.row.metric,
            self.row.strategy,
            self.row.lambda,
            self.oa,
            self.final_l_c,
            self.final_l_r
        )
    }
}

pub const ABLATION_CSV_HEADER: &str =
    "row_id,architecture,representation,objective,metric,strategy,lambda,OA,final_Lc,final_Lr\n";

/// Assembles the ablation CSV. When both the baseline and the full
/// configuration are present, a trailing `delta/pcnet-vs-baseline` row
/// records their overall-accuracy difference in the OA column.
pub fn ablation_csv(outcomes: &[AblationOutcome]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    for o in outcomes {
        out.push_str(&o.csv_line());
    }
    let baseline = outcomes.iter().find(|o| o.row.id == "table3/baseline");
    let pcnet = outcomes.iter().find(|o| o.row.id == "table3/pcnet");
    if let (Some(b), Some(p)) = (baseline, pcnet) {
        if b.oa.is_finite() && p.oa.is_finite() {
            out.push_str(&format!(
                "delta/pcnet-vs-baseline,,,,,,,{},,\n",
                p.oa - b.oa
            ));
        }
    }
    out
}

/// Runs every grid row as a complete training run with the shared base seed.
/// With an output directory, finished rows persist as `row_*.csv` fragments
/// and are skipped on rerun, so an interrupted grid resumes where it stopped.
pub fn run_ablation<T: Scalar>(
    rows: &[AblationRow],
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationOutcome>> {
    let mut outcomes = Vec::new();
    for row in rows {
        let fragment = out_dir.map(|d| d.join(format!("row_{}.csv", row.id.replace('/', "_"))));
        if let Some(path) = &fragment {
            if let Some(outcome) = load_fragment(path, row) {
                log::info!("ablation row '{}' already done; skipping", row.id);
                outcomes.push(outcome);
                continue;
            }
        }
        let outcome = run_row::<T>(row, train_set, test_set, base);
        if let Some(path) = &fragment {
            std::fs::write(path, outcome.csv_line())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        outcomes.push(outcome);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("ablation.csv");
        std::fs::write(&path, ablation_csv(&outcomes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(outcomes)
}

fn load_fragment(path: &Path, row: &AblationRow) -> Option<AblationOutcome> {
    let line = std::fs::read_to_string(path).ok()?;
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 10 || fields[0] != row.id {
        return None;
    }
    Some(AblationOutcome {
        row: row.clone(),
        oa: fields[7].parse().ok()?,
        final_l_c: fields[8].parse().ok()?,
        final_l_r: fields[9].parse().ok()?,
        error: None,
    })
}

fn run_row<T: Scalar>(
    row: &AblationRow,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
) -> AblationOutcome {
    let config = row.apply(base);
    let result = (|| -> Result<(f64, f64, f64)> {
        let mut state = TrainState::<T>::new(config, train_set)?;
        let metrics = training::train(&mut state, train_set, test_set, None)?;
        let last = metrics
            .last()
            .ok_or_else(|| Error::Config("training produced no epochs".into()))?;
        Ok((last.test_oa, last.l_c, last.l_r))
    })();
    match result {
        Ok((oa, l_c, l_r)) => AblationOutcome {
            row: row.clone(),
            oa,
            final_l_c: l_c,
            final_l_r: l_r,
            error: None,
        },
        Err(e) => {
            log::error!("ablation row '{}' failed: {}", row.id, e);
            AblationOutcome {
                row: row.clone(),
                oa: f64::NAN,
                final_l_c: f64::NAN,
                final_l_r: f64::NAN,
                error: Some(e.to_string()),
            }
        }
    }
}
