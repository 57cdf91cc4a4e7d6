//! Foreground mIoU over episodes, ablation tables and visual panels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::episodes::io::to_u8;
use crate::episodes::{sample_episode_from, Dataset, Episode, Mask, SplitPlan};
use crate::error::{Error, Result};
use crate::pipeline::Segmenter;
use crate::prior::ProbMap;
use crate::refine::{binarize_upsampled, CascadeConfig, CascadeTrace};
use crate::rng::{self, tag};

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1.0 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(IouCounts::of(pred, gt)?.iou())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
            return Err(Error::Shape(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.h(),
                pred.w(),
                gt.h(),
                gt.w()
            )));
        }
        let mut c = IouCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            c.intersection += (p & g) as u64;
            c.union += (p | g) as u64;
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Intersection and union accumulated per class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts(BTreeMap<u32, IouCounts>);

impl ClassCounts {
    pub fn add(&mut self, class_id: u32, counts: IouCounts) {
        self.0.entry(class_id).or_default().merge(counts);
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (&c, &n) in &other.0 {
            self.add(c, n);
        }
    }

    pub fn get(&self, class_id: u32) -> Option<IouCounts> {
        self.0.get(&class_id).copied()
    }

    pub fn per_class(&self) -> BTreeMap<u32, f64> {
        self.0.iter().map(|(&c, n)| (c, n.iou())).collect()
    }

    /// Mean of the per-class IoUs, or 0 without any class.
    pub fn miou(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.values().map(IouCounts::iou).sum::<f64>() / self.0.len() as f64
    }
}

/// Anything that can segment the query of an episode.
pub trait EpisodeModel {
    /// Binary query mask at image resolution.
    fn predict(&self, episode: &Episode) -> Result<Mask>;

    fn fingerprint(&self) -> String;

    fn cascade(&self) -> Option<&CascadeConfig> {
        None
    }
}

impl EpisodeModel for Segmenter {
    fn predict(&self, episode: &Episode) -> Result<Mask> {
        Ok(self.run(episode)?.mask_full)
    }

    fn fingerprint(&self) -> String {
        Segmenter::fingerprint(self)
    }

    fn cascade(&self) -> Option<&CascadeConfig> {
        Some(&self.cascade)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_index: usize,
    pub shots: usize,
    pub per_class: BTreeMap<u32, f64>,
    pub miou: f64,
    pub n_episodes: usize,
    pub seed: u64,
    pub cascade: Option<CascadeConfig>,
    pub model_fingerprint: String,
    /// Hash of the model fingerprint, seed, cascade settings and episode plan.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Deterministic test episodes of a split. Classes are drawn uniformly among
/// the test classes that have enough samples for `k` shots.
pub fn sample_eval_episodes(
    dataset: &Dataset,
    split: &SplitPlan,
    n_episodes: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let usable: Vec<u32> = split
        .test_classes
        .iter()
        .copied()
        .filter(|&c| dataset.indices_of(c).len() > k)
        .collect();
    for c in &split.test_classes {
        if !usable.contains(c) {
            log::warn!("test class {c} has too few samples for {k}-shot episodes; excluded");
        }
    }
    if usable.is_empty() && n_episodes > 0 {
        return Err(Error::Empty("no test class can form an episode"));
    }
    let mut r = rng::stream(seed, &[tag::EVAL, split.split_index as u64]);
    (0..n_episodes)
        .map(|_| sample_episode_from(dataset, &usable, k, &mut r))
        .collect()
}

/// Predictions and accumulated counts over a fixed episode list.
pub fn evaluate_episodes(
    model: &dyn EpisodeModel,
    episodes: &[Episode],
) -> Result<(ClassCounts, Vec<Mask>)> {
    let mut counts = ClassCounts::default();
    let mut preds = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let pred = model.predict(ep)?;
        counts.add(ep.class_id, IouCounts::of(&pred, &ep.query.mask)?);
        preds.push(pred);
    }
    Ok((counts, preds))
}

pub fn evaluate_split(
    model: &dyn EpisodeModel,
    dataset: &Dataset,
    split: &SplitPlan,
    n_episodes: usize,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    let episodes = sample_eval_episodes(dataset, split, n_episodes, k, seed)?;
    let (counts, _) = evaluate_episodes(model, &episodes)?;
    let per_class = counts.per_class();
    for c in &split.test_classes {
        if !per_class.contains_key(c) {
            log::warn!("test class {c} received no episodes; excluded from mIoU");
        }
    }
    let model_fingerprint = model.fingerprint();
    let cascade = model.cascade().cloned();
    let plan = serde_json::json!({
        "model": model_fingerprint,
        "seed": seed,
        "cascade": cascade,
        "split": split,
        "n_episodes": n_episodes,
        "shots": k,
    });
    Ok(EvalReport {
        split_index: split.split_index,
        shots: k,
        miou: counts.miou(),
        per_class,
        n_episodes: episodes.len(),
        seed,
        cascade,
        fingerprint: crate::fingerprint(plan.to_string().as_bytes()),
        model_fingerprint,
    })
}

/// One ablation row: a variant's mIoU per seed, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
}

impl AblationRow {
    fn present(&self) -> Vec<f64> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let v = self.present();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample standard deviation; 0 for a single value.
    pub fn std(&self) -> Option<f64> {
        let v = self.present();
        let m = self.mean()?;
        if v.len() < 2 {
            return Some(0.0);
        }
        Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text grid; missing cells read `absent`.
    pub fn render(&self) -> String {
        let mut header = vec!["variant".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed {s}")));
        header.push("mean ± std".into());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.label.clone()];
            line.extend(row.cells.iter().map(|c| match c {
                Some(v) => format!("{v:.2}"),
                None => "absent".into(),
            }));
            line.push(match (row.mean(), row.std()) {
                (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
                _ => "absent".into(),
            });
            lines.push(line);
        }
        let n = lines[0].len();
        let widths: Vec<usize> = (0..n)
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (li, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if li == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (n - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Fill an ablation grid. `measure` returns the mIoU in `[0,1]` of a variant
/// under a seed, or `None` when its checkpoints are unavailable.
pub fn run_ablation_table(
    variants: &[CascadeConfig],
    seeds: &[u64],
    mut measure: impl FnMut(&CascadeConfig, u64) -> Result<Option<f64>>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cells = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let cell = measure(v, s)?;
            if cell.is_none() {
                log::warn!("{}: no result for seed {s}", v.label());
            }
            cells.push(cell.map(|m| 100.0 * m.clamp(0.0, 1.0)));
        }
        rows.push(AblationRow {
            label: v.label(),
            cells,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Panel columns `a` to `f`, left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Column {
    /// (a) support image with its foreground highlighted.
    Support,
    /// (b) query image with the ground-truth outline.
    QueryGt,
    /// (c) mask after the first refinement step.
    Baseline,
    /// (d) `p_sim` heatmap.
    Prior,
    /// (e) augmented prior fed to the last step.
    Augmented,
    /// (f) final mask.
    Final,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::Support,
        Column::QueryGt,
        Column::Baseline,
        Column::Prior,
        Column::Augmented,
        Column::Final,
    ];

    pub fn letter(self) -> char {
        (b'a' + Column::ALL.iter().position(|&c| c == self).expect("listed") as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Column> {
        let i = (c.to_ascii_lowercase() as u32).checked_sub('a' as u32)? as usize;
        Column::ALL.get(i).copied()
    }

    /// Parse a comma-separated list such as `d,e,f`.
    pub fn parse_list(s: &str) -> Result<Vec<Column>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                let mut chars = t.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Column::from_letter(c),
                    _ => None,
                }
                .ok_or_else(|| Error::config("columns", format!("'{t}' is not one of a-f")))
            })
            .collect()
    }
}

/// Foreground cells with a 4-neighbour outside the mask or the image.
pub fn mask_boundary(m: &Mask) -> Mask {
    let (h, w) = (m.h(), m.w());
    Mask::from_fn(h, w, |y, x| {
        m.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1))
    })
}

const OUTLINE: [u8; 3] = [0, 255, 0];
const OUTLINE_ALT: [u8; 3] = [255, 0, 255];

fn tile_support(ep: &Episode) -> Result<RgbImage> {
    let s = &ep.support[0];
    let mut img = crate::episodes::io::image_to_rgb(&s.image)?;
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = if s.mask.get(y as usize, x as usize) {
            Rgb([0, 1, 2].map(|i| px.0[i] / 2 + [127, 32, 32][i]))
        } else {
            Rgb(px.0.map(|v| (v as u16 * 2 / 5) as u8))
        };
    }
    Ok(img)
}

fn tile_query_gt(ep: &Episode) -> Result<RgbImage> {
    let mut img = crate::episodes::io::image_to_rgb(&ep.query.image)?;
    let edge = mask_boundary(&ep.query.mask);
    for (x, y, px) in img.enumerate_pixels_mut() {
        if edge.get(y as usize, x as usize) {
            px.0 = if px.0 == OUTLINE { OUTLINE_ALT } else { OUTLINE };
        }
    }
    Ok(img)
}

fn tile_mask(m: &Mask) -> RgbImage {
    RgbImage::from_fn(m.w() as u32, m.h() as u32, |x, y| {
        Rgb([if m.get(y as usize, x as usize) { 255 } else { 0 }; 3])
    })
}

/// Grayscale heatmap, nearest-upsampled so each cell keeps its exact value.
fn tile_heatmap(p: &ProbMap, h: usize, w: usize) -> RgbImage {
    let (ph, pw) = p.hw();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (cy, cx) = (y as usize * ph / h, x as usize * pw / w);
        Rgb([to_u8(p.values()[cy * pw + cx]); 3])
    })
}

fn tile(ep: &Episode, trace: &CascadeTrace, col: Column, threshold: f64) -> Result<RgbImage> {
    let (h, w) = ep.query.hw();
    Ok(match col {
        Column::Support => tile_support(ep)?,
        Column::QueryGt => tile_query_gt(ep)?,
        Column::Baseline => tile_mask(&binarize_upsampled(&trace.estimates[0], threshold, h, w)?),
        Column::Prior => tile_heatmap(&trace.prior, h, w),
        Column::Augmented => {
            let i = trace.augmented.len().saturating_sub(2);
            tile_heatmap(&trace.augmented[i], h, w)
        }
        Column::Final => tile_mask(&trace.mask_full),
    })
}

/// One row per episode, one tile per column; tiles take the query's size.
pub fn panel_image(
    rows: &[(&Episode, &CascadeTrace)],
    columns: &[Column],
    threshold: f64,
) -> Result<RgbImage> {
    let Some((first, _)) = rows.first() else {
        return Err(Error::Empty("panel without episodes"));
    };
    if columns.is_empty() {
        return Err(Error::Empty("panel without columns"));
    }
    let (h, w) = first.query.hw();
    let mut out = RgbImage::new((w * columns.len()) as u32, (h * rows.len()) as u32);
    for (r, (ep, trace)) in rows.iter().enumerate() {
        if ep.query.hw() != (h, w) || ep.support[0].hw() != (h, w) {
            return Err(Error::Shape("panel rows need equally sized images".into()));
        }
        for (c, &col) in columns.iter().enumerate() {
            let t = tile(ep, trace, col, threshold)?;
            image::imageops::replace(&mut out, &t, (c * w) as i64, (r * h) as i64);
        }
    }
    Ok(out)
}

/// Write a one-row panel with all six columns.
pub fn render_panel(episode: &Episode, trace: &CascadeTrace, out_path: &Path) -> Result<()> {
    render_rows(&[(episode, trace)], &Column::ALL, 0.5, out_path)
}

pub fn render_rows(
    rows: &[(&Episode, &CascadeTrace)],
    columns: &[Column],
    threshold: f64,
    out_path: &Path,
) -> Result<()> {
    let img = panel_image(rows, columns, threshold)?;
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: out_path.to_path_buf(),
            source: e,
        })
}
