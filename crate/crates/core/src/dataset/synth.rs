//! Synthetic webpage search tasks with a known ground-truth time model.
//!
//! Each page is a 1024×1024 raster of typed elements (blocks for images,
//! stripe rows for text, bordered boxes for inputs, rounded filled rects for
//! buttons and links) over a background sprinkled with decorative speckles.
//! The speckles are not DOM elements, so the clutter they add around a target
//! is visible only in the pixels.
//!
//! Normalized search time of a clean trial is
//!
//! ```text
//! 0.2009·z(y) − 0.1105·z(area) + 0.1316·z(n_candidates)
//!   + offset(type) + γ·z(clutter) + N(0, σ²)
//! ```
//!
//! where `z` standardizes over the clean trials with the population standard
//! deviation, and seconds are `time_base_s` plus that value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{
    count_dom_leaves, encode_png, save_trials, BBox, DatasetError, PageImage, Result, TargetType,
    TaskRecord, MAX_SEARCH_TIME_S, PAGE_PX,
};

/// Coefficients of standardized (y, area, n_candidates).
pub const ORACLE_COEFFICIENTS: [f64; 3] = [0.2009, -0.1105, 0.1316];
/// Offset per target type relative to image, in [`TargetType`] id order.
pub const ORACLE_TYPE_OFFSETS: [f64; 5] = [0.0, 0.6222, 0.4500, 0.5164, 0.0767];

const SPECKLES_AT_FULL_DENSITY: f64 = 2000.0;
const EDGE_CELL_PX: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub trials_per_user: usize,
    pub pages: usize,
    /// γ, weight of the standardized pixel clutter term.
    pub clutter_weight: f64,
    /// σ, standard deviation of the Gaussian noise term.
    pub noise_sd: f64,
    /// Extra incorrect (and slower) trials injected per clean trial.
    pub incorrect_rate: f64,
    /// Extra correct trials slower than the 10 s cutoff per clean trial.
    pub long_rate: f64,
    pub min_target_px: f64,
    pub max_target_w: f64,
    pub max_target_h: f64,
    pub min_elements: usize,
    pub max_elements: usize,
    /// Upper bound of the per-page count of non-rendered DOM leaves
    /// (metadata, scripts, hidden widgets).
    pub max_hidden_leaves: usize,
    /// Relative frequency of each target type, in id order.
    pub type_weights: [f64; 5],
    pub time_base_s: f64,
    /// Neighbourhood around the target used by the clutter measure.
    pub clutter_radius_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            trials_per_user: 10,
            pages: 40,
            clutter_weight: 0.0,
            noise_sd: 0.0,
            incorrect_rate: 0.10,
            long_rate: 0.12,
            min_target_px: 15.0,
            max_target_w: 320.0,
            max_target_h: 160.0,
            min_elements: 12,
            max_elements: 60,
            max_hidden_leaves: 150,
            type_weights: [0.05, 0.55, 0.30, 0.05, 0.05],
            time_base_s: 4.8,
            clutter_radius_px: 128.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.min_target_px < super::MIN_TARGET_PX {
            return bad(format!(
                "min_target_px {} is below the {}px target floor",
                self.min_target_px,
                super::MIN_TARGET_PX
            ));
        }
        if self.max_target_w < self.min_target_px || self.max_target_h < self.min_target_px {
            return bad("max target size below min_target_px".into());
        }
        if self.max_target_w > f64::from(PAGE_PX) || self.max_target_h > f64::from(PAGE_PX) {
            return bad("max target size exceeds the page".into());
        }
        if self.users == 0 || self.trials_per_user == 0 || self.pages == 0 {
            return bad("users, trials_per_user and pages must be positive".into());
        }
        if self.min_elements == 0 || self.max_elements < self.min_elements {
            return bad("element count range is empty".into());
        }
        if self.clutter_weight < 0.0 || self.noise_sd < 0.0 {
            return bad("clutter_weight and noise_sd must be non-negative".into());
        }
        for r in [self.incorrect_rate, self.long_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("rate {r} outside [0, 1]"));
            }
        }
        if self.type_weights.iter().any(|w| *w < 0.0) || self.type_weights.iter().sum::<f64>() <= 0.0 {
            return bad("type_weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }
}

/// A `{"tag": .., "children": [..]}` DOM tree node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomNode {
    pub tag: String,
    #[serde(default)]
    pub children: Vec<DomNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub kind: TargetType,
    pub bbox: BBox,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speckle {
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub shade: u8,
}

/// Layout of one synthetic page; rendering is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPage {
    pub id: String,
    pub background: [u8; 3],
    /// Fraction of the maximum speckle count drawn on this page.
    pub speckle_density: f64,
    pub elements: Vec<Element>,
    pub speckles: Vec<Speckle>,
    /// Childless DOM nodes that are never drawn.
    pub hidden_leaves: usize,
}

/// Mean and population standard deviation of a raw generator feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStat {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Ground truth behind a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub coefficients: [f64; 3],
    pub type_offsets: [f64; 5],
    pub clutter_weight: f64,
    pub noise_sd: f64,
    pub time_base_s: f64,
    pub y_stat: FeatureStat,
    pub area_stat: FeatureStat,
    pub n_candidates_stat: FeatureStat,
    pub clutter_stat: FeatureStat,
    /// Oracle normalized time per record; `None` for injected incorrect or
    /// overlong trials.
    pub normalized: Vec<Option<f64>>,
    /// Raw clutter score per record.
    pub clutter: Vec<f64>,
}

impl OracleParams {
    /// Noise-free oracle time for a target, in normalized units.
    pub fn expected(&self, bbox: &BBox, kind: TargetType, n_candidates: u32, clutter: f64) -> f64 {
        let [cy, ca, cn] = self.coefficients;
        cy * self.y_stat.z(bbox.y) + ca * self.area_stat.z(bbox.area())
            + cn * self.n_candidates_stat.z(f64::from(n_candidates))
            + self.type_offsets[kind.id()]
            + self.clutter_weight * self.clutter_stat.z(clutter)
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub seed: u64,
    pub pages: Vec<SynthPage>,
    pub records: Vec<TaskRecord>,
    pub oracle: OracleParams,
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp().clamp(lo, hi)
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x < b.x + b.w + margin
        && b.x < a.x + a.w + margin
        && a.y < b.y + b.h + margin
        && b.y < a.y + a.h + margin
}

fn random_page<R: Rng>(rng: &mut R, id: String, cfg: &SynthConfig, kinds: &WeightedIndex<f64>) -> SynthPage {
    let page = f64::from(PAGE_PX);
    let wanted = rng.random_range(cfg.min_elements..=cfg.max_elements);
    let mut elements: Vec<Element> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let kind = TargetType::ALL[kinds.sample(rng)];
        let w = log_uniform(rng, cfg.min_target_px, cfg.max_target_w).round();
        let h = log_uniform(rng, cfg.min_target_px, cfg.max_target_h).round();
        let color = [rng.random_range(20..230), rng.random_range(20..230), rng.random_range(20..230)];
        for _ in 0..60 {
            let x = rng.random_range(0.0..=page - w).floor();
            let y = rng.random_range(0.0..=page - h).floor();
            let bbox = BBox::new(x, y, w, h);
            if elements.iter().all(|e| !overlaps(&e.bbox, &bbox, 4.0)) {
                elements.push(Element { kind, bbox, color });
                break;
            }
        }
    }
    let speckle_density: f64 = rng.random();
    let n_speckles = (speckle_density * SPECKLES_AT_FULL_DENSITY).round() as usize;
    let speckles = (0..n_speckles)
        .map(|_| {
            let size = rng.random_range(6..=14);
            Speckle {
                x: rng.random_range(0..PAGE_PX - size),
                y: rng.random_range(0..PAGE_PX - size),
                size,
                shade: rng.random_range(30..110),
            }
        })
        .collect();
    let hidden_leaves = rng.random_range(0..=cfg.max_hidden_leaves);
    let background = [
        rng.random_range(228..=255),
        rng.random_range(228..=255),
        rng.random_range(228..=255),
    ];
    SynthPage {
        id,
        background,
        speckle_density,
        elements,
        speckles,
        hidden_leaves,
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn stripes(img: &mut RgbImage, b: &BBox, inset: u32, c: [u8; 3], salt: u32) {
    let (x0, y0) = (b.x as u32 + inset, b.y as u32 + inset);
    let (x1, y1) = ((b.x + b.w) as u32 - inset, (b.y + b.h) as u32 - inset);
    let width = x1.saturating_sub(x0);
    let mut row = 0u32;
    let mut y = y0;
    while y + 3 <= y1 {
        // Ragged right edge, deterministic in the row index.
        let ragged = (row.wrapping_mul(2_654_435_761).wrapping_add(salt) >> 7) % 40;
        let len = (width * (60 + ragged) / 100).max(1);
        fill(img, x0, y, x0 + len, y + 3, c);
        y += 7;
        row += 1;
    }
}

impl SynthPage {
    pub fn render(&self) -> PageImage {
        let mut img = RgbImage::from_pixel(PAGE_PX, PAGE_PX, Rgb(self.background));
        for s in &self.speckles {
            fill(&mut img, s.x, s.y, s.x + s.size, s.y + s.size, [s.shade; 3]);
        }
        for (i, e) in self.elements.iter().enumerate() {
            let b = &e.bbox;
            let (x0, y0) = (b.x as u32, b.y as u32);
            let (x1, y1) = ((b.x + b.w) as u32, (b.y + b.h) as u32);
            match e.kind {
                TargetType::Image => {
                    fill(&mut img, x0, y0, x1, y1, e.color);
                    let dark = e.color.map(|c| c / 2);
                    let (w, h) = (x1 - x0, y1 - y0);
                    fill(&mut img, x0 + w / 4, y0 + h / 3, x1 - w / 4, y1 - h / 6, dark);
                }
                TargetType::Text => {
                    fill(&mut img, x0, y0, x1, y1, self.background);
                    stripes(&mut img, b, 1, [40, 40, 40], i as u32);
                }
                TargetType::InputField => {
                    fill(&mut img, x0, y0, x1, y1, [120, 120, 120]);
                    fill(&mut img, x0 + 2, y0 + 2, x1 - 2, y1 - 2, [255, 255, 255]);
                }
                TargetType::Button | TargetType::Link => {
                    let (fillc, ink) = if e.kind == TargetType::Button {
                        (e.color, [250, 250, 250])
                    } else {
                        ([205, 220, 250], [20, 40, 200])
                    };
                    let r = ((y1 - y0) / 3).min(8);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let dx = (x0 + r).saturating_sub(x).max(x.saturating_sub(x1 - 1 - r));
                            let dy = (y0 + r).saturating_sub(y).max(y.saturating_sub(y1 - 1 - r));
                            if dx * dx + dy * dy <= r * r {
                                img.put_pixel(x, y, Rgb(fillc));
                            }
                        }
                    }
                    stripes(&mut img, b, 4, ink, i as u32);
                }
            }
        }
        img
    }

    pub fn png(&self) -> Result<Vec<u8>> {
        encode_png(&self.render())
    }

    /// A head holding the hidden leaves, and a body with one section per
    /// quarter of the page height that holds elements; every element is a
    /// leaf.
    pub fn dom(&self) -> DomNode {
        let mut sections: BTreeMap<u32, Vec<DomNode>> = BTreeMap::new();
        for e in &self.elements {
            let tag = match e.kind {
                TargetType::Image => "img",
                TargetType::Text => "p",
                TargetType::Link => "a",
                TargetType::Button => "button",
                TargetType::InputField => "input",
            };
            sections.entry(e.bbox.y as u32 / (PAGE_PX / 4)).or_default().push(DomNode {
                tag: tag.into(),
                children: vec![],
            });
        }
        const HIDDEN_TAGS: [&str; 3] = ["meta", "script", "div"];
        let head = DomNode {
            tag: "head".into(),
            children: (0..self.hidden_leaves)
                .map(|i| DomNode {
                    tag: HIDDEN_TAGS[i % HIDDEN_TAGS.len()].into(),
                    children: vec![],
                })
                .collect(),
        };
        let body = DomNode {
            tag: "body".into(),
            children: sections
                .into_values()
                .map(|children| DomNode {
                    tag: "section".into(),
                    children,
                })
                .collect(),
        };
        let mut children = vec![body];
        if self.hidden_leaves > 0 {
            children.insert(0, head);
        }
        DomNode {
            tag: "html".into(),
            children,
        }
    }
}

/// Mean absolute luminance gradient between 16 px block averages.
struct EdgeGrid {
    cells: usize,
    edge: Vec<f64>,
}

impl EdgeGrid {
    fn new(img: &PageImage) -> Self {
        let cells = (PAGE_PX / EDGE_CELL_PX) as usize;
        let mut lum = vec![0.0f64; cells * cells];
        for (x, y, p) in img.enumerate_pixels() {
            let l = (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / 255.0;
            lum[(y / EDGE_CELL_PX) as usize * cells + (x / EDGE_CELL_PX) as usize] += l;
        }
        let area = f64::from(EDGE_CELL_PX * EDGE_CELL_PX);
        lum.iter_mut().for_each(|v| *v /= area);
        // Forward differences, mirrored at the last row and column so border
        // cells are not biased low.
        let mut edge = vec![0.0; cells * cells];
        for r in 0..cells {
            for c in 0..cells {
                let v = lum[r * cells + c];
                let cx = if c + 1 < cells { c + 1 } else { c - 1 };
                let ry = if r + 1 < cells { r + 1 } else { r - 1 };
                let dx = (lum[r * cells + cx] - v).abs();
                let dy = (lum[ry * cells + c] - v).abs();
                edge[r * cells + c] = dx + dy;
            }
        }
        Self { cells, edge }
    }

    fn score(&self, bbox: &BBox, radius_px: f64) -> f64 {
        let cell = f64::from(EDGE_CELL_PX);
        let lo = |v: f64| (((v - radius_px) / cell).floor().max(0.0)) as usize;
        let hi = |v: f64| ((((v + radius_px) / cell).ceil()) as usize).min(self.cells);
        let (c0, c1) = (lo(bbox.x), hi(bbox.x + bbox.w));
        let (r0, r1) = (lo(bbox.y), hi(bbox.y + bbox.h));
        let mut total = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                total += self.edge[r * self.cells + c];
            }
        }
        total / ((r1 - r0) * (c1 - c0)) as f64
    }
}

/// Local edge density around `bbox`: the mean absolute luminance gradient
/// between 16 px block averages within `radius_px` of the box.
pub fn clutter_score(img: &PageImage, bbox: &BBox, radius_px: f64) -> f64 {
    EdgeGrid::new(img).score(bbox, radius_px)
}

struct Draw {
    page: usize,
    element: usize,
}

/// Generates pages, trials and the oracle behind them. Deterministic in
/// `(config, seed)`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = WeightedIndex::new(config.type_weights).map_err(|e| DatasetError::Config(e.to_string()))?;
    let pages: Vec<SynthPage> = (0..config.pages)
        .map(|i| random_page(&mut rng, format!("p{i:04}"), config, &kinds))
        .collect();
    let leaf_counts: Vec<u32> = pages
        .iter()
        .map(|p| {
            let dom = serde_json::to_value(p.dom()).expect("DOM serializes");
            count_dom_leaves(&dom).map(|n| n as u32)
        })
        .collect::<Result<_>>()?;
    let edge_grids: Vec<EdgeGrid> = pages.iter().map(|p| EdgeGrid::new(&p.render())).collect();

    let draw = |rng: &mut ChaCha8Rng| {
        let page = rng.random_range(0..pages.len());
        let element = rng.random_range(0..pages[page].elements.len());
        Draw { page, element }
    };

    // Clean trials first, with injected incorrect/overlong trials in between.
    enum Kind {
        Clean,
        Incorrect,
        Long,
    }
    let mut plan: Vec<(String, Draw, Kind)> = Vec::new();
    for u in 0..config.users {
        let user = format!("u{u:05}");
        for _ in 0..config.trials_per_user {
            plan.push((user.clone(), draw(&mut rng), Kind::Clean));
            if rng.random_bool(config.incorrect_rate) {
                plan.push((user.clone(), draw(&mut rng), Kind::Incorrect));
            }
            if rng.random_bool(config.long_rate) {
                plan.push((user.clone(), draw(&mut rng), Kind::Long));
            }
        }
    }

    let clutter: Vec<f64> = plan
        .iter()
        .map(|(_, d, _)| edge_grids[d.page].score(&pages[d.page].elements[d.element].bbox, config.clutter_radius_px))
        .collect();
    let clean: Vec<usize> = plan
        .iter()
        .enumerate()
        .filter(|(_, (_, _, k))| matches!(k, Kind::Clean))
        .map(|(i, _)| i)
        .collect();
    let gather = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { clean.iter().map(|&i| f(i)).collect() };
    let bbox_of = |i: usize| pages[plan[i].1.page].elements[plan[i].1.element].bbox;
    let y_stat = FeatureStat::of(&gather(&|i| bbox_of(i).y));
    let area_stat = FeatureStat::of(&gather(&|i| bbox_of(i).area()));
    let n_candidates_stat = FeatureStat::of(&gather(&|i| f64::from(leaf_counts[plan[i].1.page])));
    let clutter_stat = FeatureStat::of(&gather(&|i| clutter[i]));
    for (name, s) in [
        ("y", y_stat),
        ("area", area_stat),
        ("n_candidates", n_candidates_stat),
    ] {
        if !(s.std > 0.0) {
            return Err(DatasetError::Config(format!(
                "generated {name} has zero variance; increase pages or trials"
            )));
        }
    }
    let clutter_stat = if clutter_stat.std > 0.0 {
        clutter_stat
    } else {
        FeatureStat { std: 1.0, ..clutter_stat }
    };

    let mut oracle = OracleParams {
        coefficients: ORACLE_COEFFICIENTS,
        type_offsets: ORACLE_TYPE_OFFSETS,
        clutter_weight: config.clutter_weight,
        noise_sd: config.noise_sd,
        time_base_s: config.time_base_s,
        y_stat,
        area_stat,
        n_candidates_stat,
        clutter_stat,
        normalized: Vec::with_capacity(plan.len()),
        clutter: clutter.clone(),
    };
    let noise = Normal::new(0.0, config.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| DatasetError::Config(e.to_string()))?;
    let slow = Normal::new(3.9, 1.0).expect("valid normal");

    let mut records = Vec::with_capacity(plan.len());
    for (i, (user, d, kind)) in plan.iter().enumerate() {
        let page = &pages[d.page];
        let el = &page.elements[d.element];
        let n = leaf_counts[d.page];
        let (seconds, correct, normalized) = match kind {
            Kind::Clean => {
                let eps = if config.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let t = oracle.expected(&el.bbox, el.kind, n, clutter[i]) + eps;
                let s = (config.time_base_s + t).clamp(0.05, MAX_SEARCH_TIME_S);
                (s, true, Some(s - config.time_base_s))
            }
            Kind::Incorrect => {
                let s = (config.time_base_s + slow.sample(&mut rng)).clamp(0.5, 30.0);
                (s, false, None)
            }
            Kind::Long => (rng.random_range(10.5..25.0), true, None),
        };
        oracle.normalized.push(normalized);
        records.push(TaskRecord {
            page_id: page.id.clone(),
            screenshot: format!("screenshots/{}.png", page.id),
            bbox: el.bbox,
            target_type: el.kind,
            n_candidates: n,
            user_id: user.clone(),
            search_time_s: seconds,
            correct,
        });
    }

    Ok(SynthCorpus {
        config: config.clone(),
        seed,
        pages,
        records,
        oracle,
    })
}

impl SynthCorpus {
    pub fn page(&self, id: &str) -> Option<&SynthPage> {
        self.pages.iter().find(|p| p.id == id)
    }

    /// Rendered rasters keyed by page id.
    pub fn render_pages(&self) -> BTreeMap<String, PageImage> {
        self.pages.iter().map(|p| (p.id.clone(), p.render())).collect()
    }

    /// Writes `trials.jsonl`, `screenshots/`, `dom/` and `oracle.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("screenshots"))?;
        fs::create_dir_all(dir.join("dom"))?;
        save_trials(&self.records, dir.join("trials.jsonl"))?;
        for p in &self.pages {
            fs::write(dir.join("screenshots").join(format!("{}.png", p.id)), p.png()?)?;
            let dom = serde_json::to_vec_pretty(&p.dom()).expect("DOM serializes");
            fs::write(dir.join("dom").join(format!("{}.json", p.id)), dom)?;
        }
        #[derive(Serialize)]
        struct OracleFile<'a> {
            seed: u64,
            config: &'a SynthConfig,
            oracle: &'a OracleParams,
        }
        let oracle = serde_json::to_vec_pretty(&OracleFile {
            seed: self.seed,
            config: &self.config,
            oracle: &self.oracle,
        })
        .expect("oracle serializes");
        fs::write(dir.join("oracle.json"), oracle)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::filter_trials;

    fn small() -> SynthConfig {
        SynthConfig {
            users: 12,
            trials_per_user: 8,
            pages: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_generate(&small(), 11).unwrap();
        let b = synth_generate(&small(), 11).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.pages[0].png().unwrap(), b.pages[0].png().unwrap());
        let c = synth_generate(&small(), 12).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn rejects_targets_below_floor() {
        let cfg = SynthConfig {
            min_target_px: 10.0,
            ..small()
        };
        assert!(matches!(synth_generate(&cfg, 0), Err(DatasetError::Config(_))));
    }

    #[test]
    fn records_are_valid_and_dom_matches() {
        let corpus = synth_generate(&small(), 3).unwrap();
        for r in &corpus.records {
            r.validate().unwrap();
            let page = corpus.page(&r.page_id).unwrap();
            let dom = serde_json::to_value(page.dom()).unwrap();
            assert_eq!(count_dom_leaves(&dom).unwrap() as u32, r.n_candidates);
        }
    }

    #[test]
    fn noiseless_oracle_is_exact_and_monotone_in_y() {
        let corpus = synth_generate(&small(), 5).unwrap();
        let o = &corpus.oracle;
        for (i, r) in corpus.records.iter().enumerate() {
            if let Some(t) = o.normalized[i] {
                let expect = o.expected(&r.bbox, r.target_type, r.n_candidates, o.clutter[i]);
                assert!((t - expect).abs() < 1e-9);
            }
        }
        let b = BBox::new(100.0, 200.0, 40.0, 40.0);
        let lower = BBox { y: 600.0, ..b };
        assert!(o.expected(&lower, TargetType::Text, 30, 0.1) > o.expected(&b, TargetType::Text, 30, 0.1));
    }

    #[test]
    fn incorrect_trials_are_slower_and_filtered() {
        let corpus = synth_generate(&small(), 9).unwrap();
        let (kept, report) = filter_trials(&corpus.records);
        assert_eq!(kept.len(), corpus.oracle.normalized.iter().flatten().count());
        assert!(report.incorrect_count > 0);
        assert!(report.mean_incorrect_s.unwrap() > report.mean_kept_s.unwrap());
    }

    #[test]
    fn speckles_raise_clutter() {
        let mut page = synth_generate(&small(), 1).unwrap().pages.remove(0);
        page.elements.clear();
        let bbox = BBox::new(400.0, 400.0, 50.0, 50.0);
        page.speckles.clear();
        let clean = clutter_score(&page.render(), &bbox, 128.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        page.speckles = (0..600)
            .map(|_| Speckle {
                x: rng.random_range(0..1000),
                y: rng.random_range(0..1000),
                size: 10,
                shade: 60,
            })
            .collect();
        assert!(clutter_score(&page.render(), &bbox, 128.0) > clean + 0.01);
    }
}
