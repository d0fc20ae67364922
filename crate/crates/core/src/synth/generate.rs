use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::anchors::{AnchorGrid, AnchorSpec};
use super::oracle::{oracle_label, OracleCandidate};
use super::plan::{InjectionPlan, ObjectTarget, PipelineMode};
use super::{image_seed, ObjectTruth, SynthDump, SynthError};
use crate::config::AnalysisConfig;
use crate::geometry::{iou, BBox};
use crate::interchange::format::quantize;
use crate::interchange::{
    ClassCatalog, ClassIndex, DumpHeader, GroundTruthObject, ImageIntrospection, Proposal, RefinedCandidate,
    ScoreVector,
};
use crate::matching::{match_image, GtLabel};
use crate::mechanism::MechanismLabel;
use crate::nms::replay;

/// Rebuild rounds per image before a plan is declared unsatisfiable.
pub const MAX_ATTEMPTS: usize = 200;

/// Two-stage score vectors keep their target mass below this so the background entry stays non-negative.
const MASS_CAP: f64 = 0.99;
const HIGH_CAP: f64 = 0.98;
const MIN_IOU: f64 = 0.05;
const MAX_IOU: f64 = 0.98;

struct Ctx<'a> {
    plan: &'a InjectionPlan,
    cfg: &'a AnalysisConfig,
    catalog: ClassCatalog,
    header: DumpHeader,
    spec: Option<AnchorSpec>,
    anchors: Option<Arc<Vec<BBox>>>,
}

impl<'a> Ctx<'a> {
    fn new(plan: &'a InjectionPlan, cfg: &'a AnalysisConfig) -> Result<Self, SynthError> {
        plan.validate()?;
        cfg.validate().map_err(SynthError::InvalidPlan)?;
        let m = plan.noise.score_margin;
        if cfg.theta_cls + m > HIGH_CAP || cfg.theta_cls - m <= 0.0 {
            return Err(SynthError::InvalidPlan(format!(
                "theta_cls {} leaves no room for score_margin {m}",
                cfg.theta_cls
            )));
        }
        if cfg.theta_loc + m > MAX_IOU || cfg.theta_loc - m <= MIN_IOU {
            return Err(SynthError::InvalidPlan(format!(
                "theta_loc {} leaves no room for score_margin {m}",
                cfg.theta_loc
            )));
        }
        if plan.noise.background_score_max > cfg.theta_cls - m {
            return Err(SynthError::InvalidPlan(
                "noise.background_score_max must sit below theta_cls by score_margin".into(),
            ));
        }
        if plan.noise.regressor_corruption > cfg.theta_loc - m {
            return Err(SynthError::InvalidPlan(
                "noise.regressor_corruption must sit below theta_loc by score_margin".into(),
            ));
        }
        let one_stage = plan.mode == PipelineMode::OneStage;
        let catalog = ClassCatalog::new(plan.class_names.clone(), !one_stage).map_err(SynthError::InvalidPlan)?;
        let (header, spec, anchors) = if one_stage {
            let spec = plan.anchor_spec_or_default();
            let boxes = AnchorGrid::new(plan.image_width, plan.image_height, &spec).boxes();
            (
                DumpHeader::anchors(catalog.clone(), spec.clone()),
                Some(spec),
                Some(Arc::new(boxes)),
            )
        } else {
            (DumpHeader::explicit(catalog.clone()), None, None)
        };
        Ok(Self {
            plan,
            cfg,
            catalog,
            header,
            spec,
            anchors,
        })
    }

    fn one_stage(&self) -> bool {
        self.spec.is_some()
    }

    fn grid(&self) -> Option<AnchorGrid<'_>> {
        self.spec
            .as_ref()
            .map(|s| AnchorGrid::new(self.plan.image_width, self.plan.image_height, s))
    }

    fn margin(&self) -> f64 {
        self.plan.noise.score_margin
    }

    fn n(&self) -> usize {
        self.catalog.num_classes()
    }
}

/// Generates every image of `plan`; output order follows the plan.
pub fn generate(plan: &InjectionPlan, seed: u64, cfg: &AnalysisConfig) -> Result<SynthDump, SynthError> {
    let ctx = Ctx::new(plan, cfg)?;
    let templates: Vec<&[ObjectTarget]> = plan.expanded().collect();
    let built: Vec<(ImageIntrospection, Vec<ObjectTruth>)> = templates
        .par_iter()
        .enumerate()
        .map(|(k, objects)| build_image(&ctx, k, objects, image_seed(seed, k as u64)))
        .collect::<Result<_, _>>()?;
    let (images, truth) = built.into_iter().unzip();
    Ok(SynthDump {
        header: ctx.header,
        images,
        truth,
    })
}

/// Generates image `index` of `plan` alone.
pub fn generate_image(
    plan: &InjectionPlan,
    index: usize,
    seed: u64,
    cfg: &AnalysisConfig,
) -> Result<(ImageIntrospection, Vec<ObjectTruth>), SynthError> {
    let ctx = Ctx::new(plan, cfg)?;
    let objects = plan.expanded().nth(index).ok_or_else(|| {
        SynthError::InvalidPlan(format!("plan has {} images, no image {index}", plan.image_count()))
    })?;
    build_image(&ctx, index, objects, image_seed(seed, index as u64))
}

fn qbox(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<BBox> {
    BBox::new(quantize(x1), quantize(y1), quantize(x2), quantize(y2)).ok()
}

/// Direction of a displacement: how overlap loss splits between axes, and signs.
#[derive(Debug, Clone, Copy)]
struct Heading {
    lambda: f64,
    sx: f64,
    sy: f64,
}

impl Heading {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let sign = |r: &mut ChaCha8Rng| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            lambda: rng.gen(),
            sx: sign(rng),
            sy: sign(rng),
        }
    }
}

/// Same-size copy of `g` shifted along `h` so that its IoU with `g` is `t`.
///
/// With overlap fractions `fx, fy` per axis, IoU is `fx·fy / (2 − fx·fy)`;
/// solving for `q = fx·fy` gives `q = 2t / (1 + t)`.
fn shifted(g: &BBox, t: f64, h: Heading) -> Option<BBox> {
    let q = 2.0 * t / (1.0 + t);
    let fx = q.powf(h.lambda);
    let fy = q.powf(1.0 - h.lambda);
    let dx = h.sx * (1.0 - fx) * g.width();
    let dy = h.sy * (1.0 - fy) * g.height();
    qbox(g.x1() + dx, g.y1() + dy, g.x2() + dx, g.y2() + dy)
}

/// Concentric copy of `g` scaled so that its IoU with `g` is `t`.
fn rescaled(g: &BBox, t: f64, grow: bool) -> Option<BBox> {
    let k = if grow { 1.0 / t.sqrt() } else { t.sqrt() };
    let (cx, cy) = g.center();
    let (w, h) = (g.width() * k / 2.0, g.height() * k / 2.0);
    qbox(cx - w, cy - h, cx + w, cy + h)
}

/// A box with IoU `t` against `g` in a random direction; grown boxes only for `t >= 0.3` so they stay in the cell.
fn perturb(g: &BBox, t: f64, rng: &mut ChaCha8Rng) -> BBox {
    let roll: f64 = rng.gen();
    let b = if roll < 0.7 || (roll >= 0.85 && t < 0.3) {
        shifted(g, t, Heading::random(rng))
    } else {
        rescaled(g, t, roll >= 0.85)
    };
    b.unwrap_or(*g)
}

struct Cand {
    /// Two-stage proposal box, or one-stage anchor index.
    source: Source,
    refined: BBox,
    scores: Vec<f64>,
}

enum Source {
    Proposal(BBox),
    Anchor(u64),
}

struct ObjectBuild {
    gt: BBox,
    class_index: ClassIndex,
    cands: Vec<Cand>,
}

/// Score sampling for one image.
struct Scores {
    n: usize,
    theta: f64,
    margin: f64,
    /// Two-stage vectors are a distribution with background; one-stage are independent sigmoids.
    softmax: bool,
}

impl Scores {
    fn high(&self, rng: &mut ChaCha8Rng) -> f64 {
        quantize(rng.gen_range(self.theta + self.margin..=HIGH_CAP))
    }

    fn low(&self, cap: f64, rng: &mut ChaCha8Rng) -> f64 {
        let top = cap.min(self.theta - self.margin).max(0.0);
        quantize(rng.gen_range(0.0..=top))
    }

    /// Fills every class below threshold except the fixed entries, respecting the two-stage mass cap.
    fn fill(&self, fixed: &[(usize, f64)], cap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let used: f64 = fixed.iter().map(|f| f.1).sum();
        let free = self.n - fixed.len();
        let cap = if self.softmax && free > 0 {
            cap.min((MASS_CAP - used).max(0.0) / free as f64)
        } else {
            cap
        };
        let mut v: Vec<f64> = (0..self.n).map(|_| self.low(cap, rng)).collect();
        for &(j, s) in fixed {
            v[j] = s;
        }
        v
    }

    fn all_low(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.fill(&[], 1.0, rng)
    }

    fn with_high(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let h = self.high(rng);
        self.fill(&[(class, h)], 1.0, rng)
    }

    /// Unconstrained scores: sometimes one class (two-stage) or several (one-stage) clear the threshold.
    fn random(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.softmax {
            if rng.gen_bool(0.4) {
                let j = rng.gen_range(0..self.n);
                self.with_high(j, rng)
            } else {
                self.all_low(rng)
            }
        } else {
            (0..self.n)
                .map(|_| if rng.gen_bool(0.2) { self.high(rng) } else { self.low(1.0, rng) })
                .collect()
        }
    }

    /// Random scores with class `c` held below threshold.
    fn random_without(&self, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = self.random(rng);
        if v[c] >= self.theta {
            v[c] = self.low(1.0, rng);
        }
        v
    }

    /// Class `c` below threshold and some other class above.
    fn wrong_class(&self, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut j = rng.gen_range(0..self.n - 1);
        if j >= c {
            j += 1;
        }
        self.with_high(j, rng)
    }

    fn to_vector(&self, mut v: Vec<f64>) -> ScoreVector {
        if self.softmax {
            let mass: f64 = v.iter().sum();
            v.push(quantize((1.0 - mass).max(0.0)));
        }
        ScoreVector::new(v)
    }
}

struct Cell {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

struct Builder<'c, 'a> {
    ctx: &'c Ctx<'a>,
    grid: Option<AnchorGrid<'c>>,
    scores: Scores,
    loc: f64,
    m: f64,
}

impl Builder<'_, '_> {
    fn localized_iou(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(self.loc + self.m..=MAX_IOU)
    }

    fn unlocalized_iou(&self, floor: f64, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(floor..=self.loc - self.m)
    }

    fn any_iou(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(MIN_IOU..=MAX_IOU)
    }

    /// Anchor index of the smallest-level anchor nearest to `b`'s center.
    fn nearest_anchor(&self, b: &BBox) -> u64 {
        let grid = self.grid.as_ref().expect("one-stage builder has a grid");
        let (cx, cy) = b.center();
        let (row, col) = grid.nearest_location(0, cx, cy);
        grid.index_of(0, row, col, 0)
    }

    fn cand(&self, gt: &BBox, proposal_iou: f64, refined: BBox, scores: Vec<f64>, rng: &mut ChaCha8Rng) -> Cand {
        let source = if self.ctx.one_stage() {
            Source::Anchor(self.nearest_anchor(&refined))
        } else {
            Source::Proposal(perturb(gt, proposal_iou, rng))
        };
        Cand {
            source,
            refined,
            scores,
        }
    }

    fn sample_gt(&self, cell: &Cell, rng: &mut ChaCha8Rng, tiny: Option<f64>) -> Option<BBox> {
        let (w, h) = match tiny {
            Some(side) => (rng.gen_range(0.3..=0.5) * side, rng.gen_range(0.3..=0.5) * side),
            None => (rng.gen_range(0.15..=0.3) * cell.w, rng.gen_range(0.15..=0.3) * cell.h),
        };
        let cx = rng.gen_range(cell.x0 + 1.5 * w..=cell.x0 + cell.w - 1.5 * w);
        let cy = rng.gen_range(cell.y0 + 1.5 * h..=cell.y0 + cell.h - 1.5 * h);
        qbox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// One-stage regressor objects start from an anchor that fits the cell.
    fn gt_from_anchor(&self, cell: &Cell, rng: &mut ChaCha8Rng) -> Option<(BBox, u64)> {
        let grid = self.grid.as_ref()?;
        let per = self.ctx.spec.as_ref()?.anchors_per_location();
        let mut kinds = Vec::new();
        for level in 0..grid.levels().len() {
            for k in 0..per {
                let (w, h) = grid.anchor_dims(level, k);
                if w <= 0.2 * cell.w && h <= 0.2 * cell.h {
                    kinds.push((level, k, w, h));
                }
            }
        }
        kinds.shuffle(rng);
        for (level, k, w, h) in kinds {
            let (r0, c0) = grid.nearest_location(level, cell.x0 + 2.0 * w, cell.y0 + 2.0 * h);
            let (r1, c1) = grid.nearest_location(level, cell.x0 + cell.w - 2.0 * w, cell.y0 + cell.h - 2.0 * h);
            let rows: Vec<u64> = (r0..=r1)
                .filter(|&r| {
                    let cy = grid.center(level, r, 0).1;
                    cy >= cell.y0 + 2.0 * h && cy <= cell.y0 + cell.h - 2.0 * h
                })
                .collect();
            let cols: Vec<u64> = (c0..=c1)
                .filter(|&c| {
                    let cx = grid.center(level, 0, c).0;
                    cx >= cell.x0 + 2.0 * w && cx <= cell.x0 + cell.w - 2.0 * w
                })
                .collect();
            if let (Some(&row), Some(&col)) = (rows.choose(rng), cols.choose(rng)) {
                let anchor = grid.make(level, row, col, k);
                let gt = perturb(&anchor, self.localized_iou(rng), rng);
                return Some((gt, grid.index_of(level, row, col, k)));
            }
        }
        None
    }

    fn smallest_anchor_side(&self) -> Option<f64> {
        let grid = self.grid.as_ref()?;
        let per = self.ctx.spec.as_ref()?.anchors_per_location();
        (0..grid.levels().len())
            .flat_map(|l| (0..per).map(move |k| (l, k)))
            .map(|(l, k)| {
                let (w, h) = grid.anchor_dims(l, k);
                (w * h).sqrt()
            })
            .min_by(f64::total_cmp)
    }

    fn decoy(&self, target: ObjectTarget, gt: &BBox, c: usize, rng: &mut ChaCha8Rng) -> Cand {
        use ObjectTarget::*;
        let s = &self.scores;
        let localized_ok = rng.gen_bool(0.5);
        let (prop_iou, refined_iou, scores) = match target {
            ProposalProcess => (
                self.unlocalized_iou(MIN_IOU, rng),
                self.unlocalized_iou(MIN_IOU, rng),
                s.random(rng),
            ),
            Regressor => (self.any_iou(rng), self.unlocalized_iou(MIN_IOU, rng), s.random(rng)),
            BackgroundClassification if localized_ok => (self.any_iou(rng), self.localized_iou(rng), s.all_low(rng)),
            InterclassClassification | ClassifierCalibration | Detected if localized_ok => {
                (self.any_iou(rng), self.localized_iou(rng), s.random_without(c, rng))
            }
            ClassifierCalibration | Detected => (
                self.any_iou(rng),
                self.unlocalized_iou(MIN_IOU, rng),
                s.random_without(c, rng),
            ),
            BackgroundClassification | InterclassClassification | Ignored => {
                (self.any_iou(rng), self.unlocalized_iou(MIN_IOU, rng), s.random(rng))
            }
        };
        let refined = perturb(gt, refined_iou, rng);
        self.cand(gt, prop_iou, refined, scores, rng)
    }

    fn build_object(&self, target: ObjectTarget, cell: &Cell, rng: &mut ChaCha8Rng) -> Option<ObjectBuild> {
        use ObjectTarget::*;
        let n = self.ctx.n();
        let class_index = rng.gen_range(1..=n as ClassIndex);
        let c = class_index as usize - 1;
        let s = &self.scores;
        let noise = &self.ctx.plan.noise;

        let mut anchor_for_gt = None;
        let gt = match target {
            Regressor if self.ctx.one_stage() => {
                let (gt, idx) = self.gt_from_anchor(cell, rng)?;
                anchor_for_gt = Some(idx);
                gt
            }
            ProposalProcess if self.ctx.one_stage() => self.sample_gt(cell, rng, Some(self.smallest_anchor_side()?))?,
            _ => self.sample_gt(cell, rng, None)?,
        };

        let mut cands = Vec::new();
        match target {
            Detected => {
                let refined = perturb(&gt, rng.gen_range((self.loc + self.m).max(0.7)..=MAX_IOU), rng);
                let scores = s.with_high(c, rng);
                cands.push(self.cand(&gt, self.any_iou(rng), refined, scores, rng));
            }
            Ignored => {
                if rng.gen_bool(0.5) {
                    let refined = perturb(&gt, self.localized_iou(rng), rng);
                    let scores = s.with_high(c, rng);
                    cands.push(self.cand(&gt, self.any_iou(rng), refined, scores, rng));
                }
            }
            ProposalProcess => {
                if !rng.gen_bool(noise.proposal_miss_probability) {
                    for _ in 0..rng.gen_range(1..=3) {
                        let refined = perturb(&gt, self.unlocalized_iou(MIN_IOU, rng), rng);
                        let p = self.unlocalized_iou(MIN_IOU, rng);
                        let scores = s.random(rng);
                        cands.push(self.cand(&gt, p, refined, scores, rng));
                    }
                }
            }
            Regressor => {
                for i in 0..rng.gen_range(1..=3) {
                    let refined = perturb(&gt, self.unlocalized_iou(noise.regressor_corruption, rng), rng);
                    let scores = s.random(rng);
                    let p = if i == 0 { self.localized_iou(rng) } else { self.any_iou(rng) };
                    let mut cand = self.cand(&gt, p, refined, scores, rng);
                    if i == 0 {
                        if let Some(idx) = anchor_for_gt {
                            cand.source = Source::Anchor(idx);
                        }
                    }
                    cands.push(cand);
                }
            }
            BackgroundClassification => {
                for _ in 0..rng.gen_range(1..=2) {
                    let refined = perturb(&gt, self.localized_iou(rng), rng);
                    let scores = s.all_low(rng);
                    cands.push(self.cand(&gt, self.any_iou(rng), refined, scores, rng));
                }
            }
            InterclassClassification => {
                if n < 2 {
                    return None;
                }
                let refined = perturb(&gt, self.localized_iou(rng), rng);
                let scores = s.wrong_class(c, rng);
                cands.push(self.cand(&gt, self.any_iou(rng), refined, scores, rng));
            }
            ClassifierCalibration => cands.extend(self.calibration(&gt, c, rng)?),
        }
        for _ in 0..noise.decoys_per_object {
            cands.push(self.decoy(target, &gt, c, rng));
        }
        Some(ObjectBuild {
            gt,
            class_index,
            cands,
        })
    }

    /// A poorly localized suppressor outscoring and overlapping every well-localized victim.
    fn calibration(&self, gt: &BBox, c: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Cand>> {
        let victims = self.ctx.plan.noise.calibration_victims as usize;
        let nms_iou = self.ctx.cfg.nms_iou;
        let s = &self.scores;
        for _ in 0..32 {
            let heading = Heading::random(rng);
            let near = (self.loc + self.m, (self.loc + 0.15).min(MAX_IOU));
            let far = ((self.loc - 0.15).max(MIN_IOU), self.loc - self.m);
            let suppressor = shifted(gt, rng.gen_range(far.0..=far.1), heading)?;
            let victim_boxes: Vec<BBox> = (0..victims)
                .filter_map(|_| shifted(gt, rng.gen_range(near.0..=near.1), heading))
                .collect();
            if victim_boxes.len() != victims
                || victim_boxes.iter().any(|v| iou(v, &suppressor) < nms_iou + self.m)
            {
                continue;
            }
            let mut highs: Vec<f64> = (0..=victims).map(|_| s.high(rng)).collect();
            highs.sort_by(|a, b| b.total_cmp(a));
            if highs.windows(2).any(|w| w[0] - w[1] < 1e-3) {
                continue;
            }
            let mut out = Vec::with_capacity(victims + 1);
            let scores = s.fill(&[(c, highs[0])], 1.0, rng);
            out.push(self.cand(gt, self.any_iou(rng), suppressor, scores, rng));
            for (v, h) in victim_boxes.into_iter().zip(&highs[1..]) {
                let scores = s.fill(&[(c, *h)], 1.0, rng);
                out.push(self.cand(gt, self.any_iou(rng), v, scores, rng));
            }
            return Some(out);
        }
        None
    }

    /// Background proposals with IoU below `0.6·θ_loc` against every object.
    fn fillers(&self, gts: &[BBox], count: usize, rng: &mut ChaCha8Rng) -> Vec<Cand> {
        let (w, h) = (
            f64::from(self.ctx.plan.image_width),
            f64::from(self.ctx.plan.image_height),
        );
        let limit = 0.6 * self.loc;
        let clear = |b: &BBox| gts.iter().all(|g| iou(g, b) < limit);
        let cap = self.ctx.plan.noise.background_score_max;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut found = None;
            for attempt in 0..20 {
                let max_side = if attempt < 10 { 0.4 * w.min(h) } else { 8.0 };
                let bw = rng.gen_range(4.0..=max_side.max(4.0));
                let bh = rng.gen_range(4.0..=max_side.max(4.0));
                let x = rng.gen_range(0.0..=w - bw);
                let y = rng.gen_range(0.0..=h - bh);
                if let Some(b) = qbox(x, y, x + bw, y + bh) {
                    if clear(&b) {
                        found = Some(b);
                        break;
                    }
                }
            }
            let Some(p) = found else { continue };
            let r = perturb(&p, rng.gen_range(0.7..=MAX_IOU), rng);
            let refined = if clear(&r) { r } else { p };
            let scores = self.scores.fill(&[], cap, rng);
            out.push(Cand {
                source: Source::Proposal(p),
                refined,
                scores,
            });
        }
        out
    }
}

fn layout(count: usize, w: f64, h: f64) -> Vec<Cell> {
    if count == 0 {
        return Vec::new();
    }
    let cols = ((count as f64 * w / h).sqrt().ceil() as usize).clamp(1, count);
    let rows = count.div_ceil(cols);
    let (cw, ch) = (w / cols as f64, h / rows as f64);
    (0..count)
        .map(|k| Cell {
            x0: (k % cols) as f64 * cw,
            y0: (k / cols) as f64 * ch,
            w: cw,
            h: ch,
        })
        .collect()
}

fn build_image(
    ctx: &Ctx<'_>,
    index: usize,
    targets: &[ObjectTarget],
    seed: u64,
) -> Result<(ImageIntrospection, Vec<ObjectTruth>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = ctx.plan;
    let builder = Builder {
        ctx,
        grid: ctx.grid(),
        scores: Scores {
            n: ctx.n(),
            theta: ctx.cfg.theta_cls,
            margin: ctx.margin(),
            softmax: !ctx.one_stage(),
        },
        loc: ctx.cfg.theta_loc,
        m: ctx.margin(),
    };
    let unsat = |object: Option<usize>, message: String| SynthError::Unsatisfiable {
        image: index,
        object,
        message,
    };

    let cells = layout(targets.len(), f64::from(plan.image_width), f64::from(plan.image_height));
    if cells.first().is_some_and(|c| c.w < 48.0 || c.h < 48.0) {
        return Err(unsat(
            None,
            format!("{} objects do not fit a {}x{} image", targets.len(), plan.image_width, plan.image_height),
        ));
    }

    let mut objects: Vec<Option<ObjectBuild>> = targets.iter().map(|_| None).collect();
    let mut failing: Vec<usize> = (0..targets.len()).collect();
    for _ in 0..MAX_ATTEMPTS {
        for &k in &failing {
            objects[k] = builder.build_object(targets[k], &cells[k], &mut rng);
        }
        if let Some(k) = objects.iter().position(Option::is_none) {
            if targets[k] == ObjectTarget::InterclassClassification && ctx.n() < 2 {
                return Err(unsat(Some(k), "interclass confusion needs at least two classes".into()));
            }
            failing = vec![k];
            continue;
        }
        let built: Vec<&ObjectBuild> = objects.iter().map(|o| o.as_ref().expect("all built")).collect();
        let image = assemble(ctx, &builder, index, targets, &built, &mut rng).map_err(|m| unsat(None, m))?;
        failing = verify(ctx, &image, targets);
        if failing.is_empty() {
            let truth = targets
                .iter()
                .zip(&image.ground_truth)
                .map(|(t, g)| ObjectTruth {
                    gt_id: g.id,
                    target: *t,
                })
                .collect();
            return Ok((image, truth));
        }
    }
    let k = failing.first().copied();
    Err(unsat(
        k,
        format!(
            "could not realize {:?} after {MAX_ATTEMPTS} attempts",
            k.map(|k| targets[k])
        ),
    ))
}

fn assemble(
    ctx: &Ctx<'_>,
    builder: &Builder<'_, '_>,
    index: usize,
    targets: &[ObjectTarget],
    built: &[&ObjectBuild],
    rng: &mut ChaCha8Rng,
) -> Result<ImageIntrospection, String> {
    let plan = ctx.plan;
    let mut image = ImageIntrospection::empty(format!("synth_{index:06}"), plan.image_width, plan.image_height);
    for (k, (o, t)) in built.iter().zip(targets).enumerate() {
        image.ground_truth.push(GroundTruthObject {
            id: k as u64 + 1,
            bbox: o.gt,
            class_index: o.class_index,
            ignore: *t == ObjectTarget::Ignored,
        });
    }

    let mut cands: Vec<&Cand> = built.iter().flat_map(|o| &o.cands).collect();
    let filler_store;
    if !ctx.one_stage() {
        let wanted = plan.proposals_per_image as usize;
        if cands.len() > wanted {
            return Err(format!(
                "plan needs {} proposals but proposals_per_image is {wanted}",
                cands.len()
            ));
        }
        let gts: Vec<BBox> = built.iter().map(|o| o.gt).collect();
        filler_store = builder.fillers(&gts, wanted - cands.len(), rng);
        cands.extend(&filler_store);
    }
    cands.shuffle(rng);

    for (i, c) in cands.iter().enumerate() {
        let proposal_id = match c.source {
            Source::Proposal(b) => {
                image.proposals.push(Proposal {
                    id: i as u64,
                    bbox: b,
                    objectness: Some(quantize(rng.gen_range(0.05..=1.0))),
                });
                i as u64
            }
            Source::Anchor(a) => a,
        };
        image.refined.push(RefinedCandidate {
            proposal_id,
            bbox: c.refined,
            scores: builder.scores.to_vector(c.scores.clone()),
            class_specific_for: None,
        });
    }
    image.detections = replay(&image.refined, &ctx.catalog, &ctx.cfg.nms());
    Ok(image)
}

/// Indices of objects whose realized outcome differs from the plan.
fn verify(ctx: &Ctx<'_>, image: &ImageIntrospection, targets: &[ObjectTarget]) -> Vec<usize> {
    let matched = match_image(image, ctx.cfg.theta_loc);
    let n = ctx.n();
    let raw: Vec<(Vec<f64>, [f64; 4])> = image
        .refined
        .iter()
        .map(|r| (r.scores.as_slice()[..n].to_vec(), r.bbox.to_array()))
        .collect();
    let cands: Vec<OracleCandidate<'_>> = raw
        .iter()
        .map(|(s, b)| OracleCandidate {
            bbox: *b,
            target_scores: s,
        })
        .collect();

    let mut failing = Vec::new();
    for (k, target) in targets.iter().enumerate() {
        let ok = match target.mechanism() {
            None if *target == ObjectTarget::Detected => {
                matches!(matched.ground_truth[k], GtLabel::Detected { .. })
            }
            None => true,
            Some(want) => matched.is_false_negative(k) && oracle_for(ctx, image, k, &cands) == Some(want),
        };
        if !ok {
            failing.push(k);
        }
    }
    failing
}

fn oracle_for(
    ctx: &Ctx<'_>,
    image: &ImageIntrospection,
    k: usize,
    cands: &[OracleCandidate<'_>],
) -> Option<MechanismLabel> {
    let gt = &image.ground_truth[k];
    let (theta_loc, theta_cls) = (ctx.cfg.theta_loc, ctx.cfg.theta_cls);
    let g = gt.bbox.to_array();
    let c = gt.class_index as usize;
    match &ctx.anchors {
        Some(a) => oracle_label(&g, c, cands, a.iter().map(BBox::to_array), theta_loc, theta_cls),
        None => oracle_label(
            &g,
            c,
            cands,
            image.proposals.iter().map(|p| p.bbox.to_array()),
            theta_loc,
            theta_cls,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange::{validate_consistency, AnchorCache};
    use crate::mechanism::classify_fn;
    use crate::synth::plan::ImagePlan;

    fn plan(objects: Vec<ObjectTarget>, repeat: u32) -> InjectionPlan {
        let mut p = InjectionPlan::new(vec!["a".into(), "b".into(), "c".into()]);
        p.images.push(ImagePlan { objects, repeat });
        p
    }

    fn all_mechanisms() -> Vec<ObjectTarget> {
        MechanismLabel::ALL.iter().map(|&m| m.into()).collect()
    }

    #[test]
    fn shifted_box_hits_target_iou() {
        let g = BBox::new(10.0, 20.0, 50.0, 80.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [0.05, 0.3, 0.5, 0.77, 0.98] {
            for _ in 0..20 {
                let b = shifted(&g, t, Heading::random(&mut rng)).unwrap();
                assert!((iou(&g, &b) - t).abs() < 1e-5, "t={t} got {}", iou(&g, &b));
            }
            for grow in [false, true] {
                let b = rescaled(&g, t, grow).unwrap();
                assert!((iou(&g, &b) - t).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn two_stage_image_has_1000_proposals_and_planned_labels() {
        let cfg = AnalysisConfig::default();
        let p = plan(all_mechanisms(), 1);
        let dump = generate(&p, 7, &cfg).unwrap();
        let img = &dump.images[0];
        assert_eq!(img.proposals.len(), 1000);
        assert_eq!(img.refined.len(), 1000);
        for (truth, gt) in dump.truth[0].iter().zip(&img.ground_truth) {
            let (label, _) = classify_fn(gt.id, img, &dump.header, &AnchorCache::new(), &cfg.thresholds()).unwrap();
            assert_eq!(Some(label), truth.target.mechanism());
        }
        assert!(validate_consistency(img, &dump.header.catalog, &cfg.nms()).is_empty());
    }

    #[test]
    fn one_stage_image_uses_anchor_grid() {
        let cfg = AnalysisConfig::default();
        let mut p = plan(all_mechanisms(), 2);
        p.mode = PipelineMode::OneStage;
        let dump = generate(&p, 11, &cfg).unwrap();
        assert!(dump.header.anchor_spec().is_some());
        let cache = AnchorCache::new();
        for (img, truth) in dump.images.iter().zip(&dump.truth) {
            assert!(img.proposals.is_empty());
            for (t, gt) in truth.iter().zip(&img.ground_truth) {
                let (label, _) = classify_fn(gt.id, img, &dump.header, &cache, &cfg.thresholds()).unwrap();
                assert_eq!(Some(label), t.target.mechanism());
            }
        }
    }

    #[test]
    fn detected_and_ignored_objects() {
        let cfg = AnalysisConfig::default();
        let p = plan(vec![ObjectTarget::Detected, ObjectTarget::Ignored, ObjectTarget::Detected], 3);
        let dump = generate(&p, 1, &cfg).unwrap();
        for img in &dump.images {
            let m = match_image(img, 0.5);
            assert_eq!(m.fn_count(), 0);
            assert!(img.ground_truth[1].ignore);
        }
    }

    #[test]
    fn same_seed_same_dump_other_seed_differs() {
        let cfg = AnalysisConfig::default();
        let p = plan(all_mechanisms(), 2);
        let a = generate(&p, 5, &cfg).unwrap().to_canonical_string().unwrap();
        let b = generate(&p, 5, &cfg).unwrap().to_canonical_string().unwrap();
        let c = generate(&p, 6, &cfg).unwrap().to_canonical_string().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_plan_gives_header_only_dump() {
        let p = InjectionPlan::new(vec!["a".into()]);
        let dump = generate(&p, 0, &AnalysisConfig::default()).unwrap();
        assert!(dump.images.is_empty());
        assert_eq!(dump.to_canonical_string().unwrap().lines().count(), 1);
    }

    #[test]
    fn image_without_objects_is_valid() {
        let p = plan(vec![], 1);
        let dump = generate(&p, 0, &AnalysisConfig::default()).unwrap();
        assert!(dump.images[0].ground_truth.is_empty());
        assert_eq!(dump.images[0].proposals.len(), 1000);
    }

    #[test]
    fn interclass_with_one_class_is_unsatisfiable() {
        let mut p = InjectionPlan::new(vec!["solo".into()]);
        p.images.push(ImagePlan {
            objects: vec![ObjectTarget::Detected, ObjectTarget::InterclassClassification],
            repeat: 1,
        });
        let err = generate(&p, 0, &AnalysisConfig::default()).unwrap_err();
        assert_eq!(
            err,
            SynthError::Unsatisfiable {
                image: 0,
                object: Some(1),
                message: "interclass confusion needs at least two classes".into()
            }
        );
        assert_eq!(err.to_string(), "image 0 object 1: interclass confusion needs at least two classes");
    }

    #[test]
    fn overcrowded_image_is_unsatisfiable() {
        let p = plan(vec![ObjectTarget::Detected; 400], 1);
        assert!(matches!(
            generate(&p, 0, &AnalysisConfig::default()),
            Err(SynthError::Unsatisfiable { object: None, .. })
        ));
    }

    #[test]
    fn generate_image_matches_batch() {
        let cfg = AnalysisConfig::default();
        let p = plan(all_mechanisms(), 3);
        let dump = generate(&p, 9, &cfg).unwrap();
        let (img, _) = generate_image(&p, 2, 9, &cfg).unwrap();
        assert_eq!(img, dump.images[2]);
    }
}
