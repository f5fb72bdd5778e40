//! Explanations: gradient saliency, LIME over superpixels, Kernel SHAP with
//! an exact-Shapley reference, and the PNG overlays for each.
//!
//! LIME and SHAP share one masking convention: a [`SetFunction`] maps a
//! coalition of kept segments to the model probability of the target class
//! on the image with every other segment painted in a baseline color.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::to_rgb_image;
use crate::model::{Head, ModelGraph};
use crate::{Error, Mode, Result, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;

/// Anything that maps `[N, H, W, 3]` images to `[N, 2]` class probabilities.
pub trait Classifier {
    fn class_probs(&self, batch: &Tensor) -> Result<Tensor>;
}

/// A differentiable class score, recorded on a tape for a single image.
pub trait ScoreModel {
    /// Scalar score of `class` for the `[1, H, W, C]` input.
    fn class_score(&self, tape: &mut Tape, input: Var, class: usize) -> Result<Var>;
}

impl Classifier for ModelGraph {
    fn class_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let p = self.predict_proba(batch, 32)?;
        match self.head() {
            Head::Softmax2 => Ok(p),
            Head::Sigmoid1 => {
                let n = p.len();
                Tensor::new(&[n, 2], p.data().iter().flat_map(|&u| [1.0 - u, u]).collect())
            }
        }
    }
}

impl ScoreModel for ModelGraph {
    /// Pre-activation head output. For a sigmoid head the single logit
    /// scores the uninfected class, and its negation scores parasitized.
    fn class_score(&self, tape: &mut Tape, input: Var, class: usize) -> Result<Var> {
        check_class(class)?;
        let pass = self.forward_on_tape(tape, input, Mode::Infer, 0, false)?;
        let logits = pass.logits;
        let n = tape.value(logits).shape()[0];
        match self.head() {
            Head::Softmax2 => {
                let mask = tape.constant(Tensor::from_fn(&[n, 2], |i| f64::from(i % 2 == class)));
                let picked = tape.mul(logits, mask)?;
                Ok(tape.sum_all(picked))
            }
            Head::Sigmoid1 => {
                let s = tape.sum_all(logits);
                Ok(if class == 1 { s } else { tape.scale(s, -1.0) })
            }
        }
    }
}

fn check_class(class: usize) -> Result<()> {
    if class >= NUM_CLASSES {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    Ok(())
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(format!("expected an [H, W, C] image, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// segmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    Grid {
        cells: usize,
    },
    Slic {
        target_segments: usize,
        compactness: f64,
        iterations: usize,
    },
}

impl Segmentation {
    pub const DEFAULT_GRID: Segmentation = Segmentation::Grid { cells: 7 };
    pub const DEFAULT_SLIC: Segmentation = Segmentation::Slic {
        target_segments: 50,
        compactness: 0.2,
        iterations: 10,
    };
}

impl FromStr for Segmentation {
    type Err = Error;

    /// `grid`, `grid:N`, `slic` or `slic:N`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let n = arg
            .map(|a| a.parse::<usize>().map_err(|_| Error::invalid(format!("bad segment count in {s:?}"))))
            .transpose()?;
        match kind {
            "grid" => Ok(Segmentation::Grid { cells: n.unwrap_or(7) }),
            "slic" => {
                let Segmentation::Slic {
                    compactness,
                    iterations,
                    ..
                } = Self::DEFAULT_SLIC
                else {
                    unreachable!()
                };
                Ok(Segmentation::Slic {
                    target_segments: n.unwrap_or(50),
                    compactness,
                    iterations,
                })
            }
            _ => Err(Error::invalid(format!("unknown segmentation {s:?}; use grid[:N] or slic[:N]"))),
        }
    }
}

/// Per-pixel segment ids, row-major, with ids `0..count` all in use.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    ids: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl SegmentMap {
    /// Validates that every id below the maximum is used at least once.
    pub fn from_ids(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width || ids.is_empty() {
            return Err(Error::shape(format!("{} ids for a {height}x{width} image", ids.len())));
        }
        let count = ids.iter().max().unwrap() + 1;
        let mut members = vec![Vec::new(); count];
        for (p, &id) in ids.iter().enumerate() {
            members[id].push(p);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("segment {empty} is empty")));
        }
        Ok(Self {
            height,
            width,
            ids,
            members,
        })
    }

    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id_at(&self, y: usize, x: usize) -> usize {
        self.ids[y * self.width + x]
    }

    /// Row-major pixel indices of segment `s`.
    pub fn pixels(&self, s: usize) -> &[usize] {
        &self.members[s]
    }

    /// SHA-256 over the extents and ids, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u32).to_le_bytes());
        h.update((self.width as u32).to_le_bytes());
        for &id in &self.ids {
            h.update((id as u32).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True if pixel `p` has a 4-neighbor in another segment.
    pub fn is_boundary(&self, p: usize) -> bool {
        let (y, x) = (p / self.width, p % self.width);
        let id = self.ids[p];
        (y > 0 && self.ids[p - self.width] != id)
            || (y + 1 < self.height && self.ids[p + self.width] != id)
            || (x > 0 && self.ids[p - 1] != id)
            || (x + 1 < self.width && self.ids[p + 1] != id)
    }
}

pub fn segment_image(image: &Tensor, method: &Segmentation) -> Result<SegmentMap> {
    let (h, w, c) = image_dims(image)?;
    match *method {
        Segmentation::Grid { cells } => {
            if cells == 0 || cells > h || cells > w {
                return Err(Error::invalid(format!("grid of {cells} cells on a {h}x{w} image")));
            }
            let ids = (0..h * w)
                .map(|p| (p / w) * cells / h * cells + (p % w) * cells / w)
                .collect();
            SegmentMap::from_ids(h, w, ids)
        }
        Segmentation::Slic {
            target_segments,
            compactness,
            iterations,
        } => {
            if target_segments == 0 || target_segments > h * w {
                return Err(Error::invalid(format!(
                    "{target_segments} segments requested for {} pixels",
                    h * w
                )));
            }
            if !(compactness > 0.0) {
                return Err(Error::invalid("compactness must be positive"));
            }
            slic(image, h, w, c, target_segments, compactness, iterations)
        }
    }
}

/// k-means over (color, position / S) with centers started on a regular
/// lattice of spacing S = sqrt(HW / k). Exhaustive assignment, ties to the
/// lower center index.
fn slic(image: &Tensor, h: usize, w: usize, c: usize, k: usize, compactness: f64, iterations: usize) -> Result<SegmentMap> {
    let s = ((h * w) as f64 / k as f64).sqrt();
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let (sy, sx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let px = image.data();
    // center = [y, x, color...]
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let cy = (i as f64 + 0.5) * sy - 0.5;
            let cx = (j as f64 + 0.5) * sx - 0.5;
            let p = (cy.round() as usize).min(h - 1) * w + (cx.round() as usize).min(w - 1);
            let mut v = vec![cy, cx];
            v.extend_from_slice(&px[p * c..p * c + c]);
            centers.push(v);
        }
    }
    let spatial = (compactness / s).powi(2);
    let mut labels = vec![0usize; h * w];
    for _ in 0..iterations.max(1) {
        for (p, label) in labels.iter_mut().enumerate() {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let color = &px[p * c..p * c + c];
            let mut best = (f64::INFINITY, 0);
            for (ci, ctr) in centers.iter().enumerate() {
                let dc: f64 = color.iter().zip(&ctr[2..]).map(|(a, b)| (a - b) * (a - b)).sum();
                let ds = (y - ctr[0]).powi(2) + (x - ctr[1]).powi(2);
                let d = dc + spatial * ds;
                if d < best.0 {
                    best = (d, ci);
                }
            }
            *label = best.1;
        }
        let mut sums = vec![vec![0.0; 2 + c]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let acc = &mut sums[l];
            acc[0] += (p / w) as f64;
            acc[1] += (p % w) as f64;
            for (a, v) in acc[2..].iter_mut().zip(&px[p * c..p * c + c]) {
                *a += v;
            }
        }
        for ((ctr, sum), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                for (a, s) in ctr.iter_mut().zip(sum) {
                    *a = s / n as f64;
                }
            }
        }
    }
    // drop clusters that ended empty and renumber the rest in center order
    let mut used = vec![false; centers.len()];
    for &l in &labels {
        used[l] = true;
    }
    let remap: Vec<usize> = used
        .iter()
        .scan(0, |next, &u| {
            let id = *next;
            *next += usize::from(u);
            Some(id)
        })
        .collect();
    SegmentMap::from_ids(h, w, labels.into_iter().map(|l| remap[l]).collect())
}

// ---------------------------------------------------------------------------
// set functions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    MeanColor,
    Gray,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean_color" => Ok(Baseline::MeanColor),
            "gray" | "grey" => Ok(Baseline::Gray),
            _ => Err(Error::invalid(format!("unknown baseline {s:?}"))),
        }
    }
}

pub fn baseline_color(image: &Tensor, baseline: Baseline) -> Result<Vec<f64>> {
    let (h, w, c) = image_dims(image)?;
    Ok(match baseline {
        Baseline::Gray => vec![0.5; c],
        Baseline::MeanColor => {
            let mut sum = vec![0.0; c];
            for px in image.data().chunks_exact(c) {
                for (s, v) in sum.iter_mut().zip(px) {
                    *s += v;
                }
            }
            sum.into_iter().map(|s| s / (h * w) as f64).collect()
        }
    })
}

/// The image with every segment not in `keep` painted `color`.
pub fn mask_image(image: &Tensor, segments: &SegmentMap, keep: &[bool], color: &[f64]) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    if (segments.height, segments.width) != (h, w) || keep.len() != segments.count() || color.len() != c {
        return Err(Error::shape("mask_image: image, segments and mask disagree"));
    }
    let mut out = image.clone();
    for (p, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if !keep[segments.ids[p]] {
            px.copy_from_slice(color);
        }
    }
    Ok(out)
}

type BatchEval<'a> = Box<dyn FnMut(&[Vec<bool>]) -> Result<Vec<f64>> + 'a>;

/// Memoized map from coalitions (kept-player masks) to scores.
pub struct SetFunction<'a> {
    players: usize,
    eval: BatchEval<'a>,
    memo: HashMap<Vec<bool>, f64>,
    evaluations: usize,
}

impl<'a> SetFunction<'a> {
    /// `eval` receives batches of distinct, not yet seen coalitions.
    pub fn new(players: usize, eval: impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>> + 'a) -> Self {
        Self {
            players,
            eval: Box::new(eval),
            memo: HashMap::new(),
            evaluations: 0,
        }
    }

    pub fn from_fn(players: usize, f: impl Fn(&[bool]) -> f64 + 'a) -> Self {
        Self::new(players, move |batch| Ok(batch.iter().map(|z| f(z)).collect()))
    }

    /// A set function whose value is `f` of this one's, sharing what has
    /// been evaluated so far. With two classes, `|p| 1.0 - p` turns one
    /// class's probabilities into the other's without new model calls.
    pub fn map_values(self, f: impl Fn(f64) -> f64 + Copy + 'a) -> SetFunction<'a> {
        let memo = self.memo.iter().map(|(k, &v)| (k.clone(), f(v))).collect();
        let mut inner = self.eval;
        SetFunction {
            players: self.players,
            eval: Box::new(move |batch| Ok(inner(batch)?.into_iter().map(f).collect())),
            memo,
            evaluations: self.evaluations,
        }
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// Number of coalitions passed to the underlying evaluator so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn value(&mut self, coalition: &[bool]) -> Result<f64> {
        Ok(self.values(&[coalition.to_vec()])?[0])
    }

    pub fn values(&mut self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        let mut todo: Vec<Vec<bool>> = Vec::new();
        for z in coalitions {
            if z.len() != self.players {
                return Err(Error::shape(format!("coalition of {} for {} players", z.len(), self.players)));
            }
            if !self.memo.contains_key(z) && !todo.contains(z) {
                todo.push(z.clone());
            }
        }
        if !todo.is_empty() {
            let vals = (self.eval)(&todo)?;
            if vals.len() != todo.len() {
                return Err(Error::invalid("set function evaluator returned the wrong count"));
            }
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("set function value {bad}")));
            }
            self.evaluations += todo.len();
            self.memo.extend(todo.into_iter().zip(vals));
        }
        Ok(coalitions.iter().map(|z| self.memo[z]).collect())
    }
}

/// Probability of `class` with segments outside the coalition masked.
pub fn make_set_function<'a>(
    model: &'a dyn Classifier,
    image: &'a Tensor,
    segments: &'a SegmentMap,
    class: usize,
    baseline: Baseline,
) -> Result<SetFunction<'a>> {
    check_class(class)?;
    let color = baseline_color(image, baseline)?;
    let (h, w, c) = image_dims(image)?;
    Ok(SetFunction::new(segments.count(), move |batch| {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(32) {
            let mut data = Vec::with_capacity(chunk.len() * h * w * c);
            for keep in chunk {
                data.extend_from_slice(mask_image(image, segments, keep, &color)?.data());
            }
            let probs = model.class_probs(&Tensor::new(&[chunk.len(), h, w, c], data)?)?;
            out.extend(probs.data().chunks_exact(NUM_CLASSES).map(|r| r[class]));
        }
        Ok(out)
    }))
}

// ---------------------------------------------------------------------------
// Shapley values

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of one coalition of size `s` among `m` players.
pub fn shapley_kernel_weight(m: usize, s: usize) -> Result<f64> {
    if s == 0 || s >= m {
        return Err(Error::invalid(format!("kernel weight undefined for s={s}, M={m}")));
    }
    Ok((m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64))
}

fn mask_of(bits: u64, m: usize) -> Vec<bool> {
    (0..m).map(|i| bits >> i & 1 == 1).collect()
}

pub const EXACT_SHAPLEY_MAX_PLAYERS: usize = 20;

/// Shapley values by enumerating all `2^M` coalitions.
pub fn exact_shapley(setfn: &mut SetFunction) -> Result<Vec<f64>> {
    let m = setfn.players();
    if m == 0 || m > EXACT_SHAPLEY_MAX_PLAYERS {
        return Err(Error::invalid(format!("exact Shapley needs 1..={EXACT_SHAPLEY_MAX_PLAYERS} players, got {m}")));
    }
    let masks: Vec<Vec<bool>> = (0..1u64 << m).map(|b| mask_of(b, m)).collect();
    let v = setfn.values(&masks)?;
    // |S|!(M-|S|-1)!/M! = 1 / (M * C(M-1, |S|))
    let weight: Vec<f64> = (0..m).map(|s| 1.0 / (m as f64 * binomial(m - 1, s))).collect();
    let mut phi = vec![0.0; m];
    for (bits, &vs) in v.iter().enumerate() {
        let size = (bits as u64).count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                *p += weight[size] * (v[bits | 1 << i] - vs);
            }
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    /// Enumerate every coalition when `M` is below this.
    pub enumerate_below: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            enumerate_below: 13,
            n_samples: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapValues {
    /// Value of the empty coalition.
    pub phi0: f64,
    pub values: Vec<f64>,
    /// Value of the full coalition.
    pub full: f64,
    /// Proper coalitions used in the regression.
    pub coalitions: usize,
    pub enumerated: bool,
}

/// Kernel SHAP: weighted least squares over coalitions with the efficiency
/// constraint eliminated by substituting the last player.
///
/// With fewer than `enumerate_below` players (or a sample budget covering
/// every coalition) all `2^M - 2` proper coalitions are used with their
/// kernel weights. Otherwise coalition sizes are drawn in proportion to the
/// kernel mass of each size, each draw paired with its complement, and all
/// samples weighted equally.
pub fn kernel_shap(setfn: &mut SetFunction, config: &ShapConfig) -> Result<ShapValues> {
    let m = setfn.players();
    if m < 2 {
        return Err(Error::invalid(format!("kernel SHAP needs at least 2 players, got {m}")));
    }
    let phi0 = setfn.value(&vec![false; m])?;
    let full = setfn.value(&vec![true; m])?;
    let all_fit = m < 63 && (config.n_samples as u64) >= (1u64 << m) - 2;
    let enumerated = m < config.enumerate_below || all_fit;
    let (masks, weights): (Vec<Vec<bool>>, Vec<f64>) = if enumerated {
        if m >= 63 {
            return Err(Error::invalid("too many players to enumerate"));
        }
        (1..(1u64 << m) - 1)
            .map(|b| {
                let s = b.count_ones() as usize;
                (mask_of(b, m), shapley_kernel_weight(m, s).unwrap())
            })
            .unzip()
    } else {
        if config.n_samples < 2 {
            return Err(Error::invalid("kernel SHAP needs at least 2 samples"));
        }
        let size_mass: Vec<f64> = (1..m).map(|s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
        let sizes = WeightedIndex::new(&size_mass).expect("positive masses");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut masks = Vec::with_capacity(config.n_samples);
        while masks.len() + 1 < config.n_samples {
            let s = sizes.sample(&mut rng) + 1;
            let mut z = vec![false; m];
            for i in rand::seq::index::sample(&mut rng, m, s) {
                z[i] = true;
            }
            let comp: Vec<bool> = z.iter().map(|b| !b).collect();
            masks.push(z);
            masks.push(comp);
        }
        let n = masks.len();
        (masks, vec![1.0; n])
    };
    let y = setfn.values(&masks)?;

    // y - phi0 - z_M (full - phi0) = sum_{i<M} (z_i - z_M) phi_i
    let delta = full - phi0;
    let k = m - 1;
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut atb = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for ((z, &w), &yv) in masks.iter().zip(&weights).zip(&y) {
        let last = f64::from(u8::from(z[k]));
        for (r, &zi) in row.iter_mut().zip(z) {
            *r = f64::from(u8::from(zi)) - last;
        }
        let target = yv - phi0 - last * delta;
        for a in 0..k {
            if row[a] == 0.0 {
                continue;
            }
            let wa = w * row[a];
            atb[a] += wa * target;
            for b in 0..k {
                ata[(a, b)] += wa * row[b];
            }
        }
    }
    let solved = solve_checked(ata, atb, "kernel SHAP normal equations")?;
    let mut values: Vec<f64> = solved.iter().copied().collect();
    values.push(delta - values.iter().sum::<f64>());
    Ok(ShapValues {
        phi0,
        values,
        full,
        coalitions: masks.len(),
        enumerated,
    })
}

const MAX_CONDITION: f64 = 1e12;

/// Solves a symmetric system, refusing when it is numerically singular.
fn solve_checked(a: DMatrix<f64>, b: DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular {
            condition,
            context: context.to_string(),
        });
    }
    a.lu().solve(&b).ok_or_else(|| Error::Singular {
        condition,
        context: context.to_string(),
    })
}

// ---------------------------------------------------------------------------
// LIME

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            kernel_width: 0.25,
            ridge: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Weighted coefficient of determination of the surrogate.
    pub r2: f64,
    pub samples: usize,
}

/// Perturbation masks: all-ones first, then independent fair coin flips.
pub fn lime_masks(m: usize, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = vec![vec![true; m]];
    while masks.len() < n {
        masks.push((0..m).map(|_| rng.gen_bool(0.5)).collect());
    }
    masks
}

/// exp(-D^2 / width^2), D = fraction of dropped segments.
pub fn lime_kernel(mask: &[bool], width: f64) -> f64 {
    let d = mask.iter().filter(|&&b| !b).count() as f64 / mask.len() as f64;
    (-(d * d) / (width * width)).exp()
}

pub fn lime_explain(setfn: &mut SetFunction, config: &LimeConfig) -> Result<LimeFit> {
    let m = setfn.players();
    if m < 2 || config.n_samples < m {
        return Err(Error::invalid(format!(
            "LIME needs M >= 2 and at least M samples (M={m}, n={})",
            config.n_samples
        )));
    }
    let masks = lime_masks(m, config.n_samples, config.seed);
    let y = setfn.values(&masks)?;
    let w: Vec<f64> = masks.iter().map(|z| lime_kernel(z, config.kernel_width)).collect();
    weighted_ridge(&masks, &y, &w, config.ridge)
}

/// Ridge regression of `y` on the masks with an unpenalized intercept,
/// solved by weighted centering.
pub(crate) fn weighted_ridge(masks: &[Vec<bool>], y: &[f64], w: &[f64], lambda: f64) -> Result<LimeFit> {
    let m = masks[0].len();
    if masks.iter().all(|z| *z == masks[0]) {
        return Err(Error::invalid("LIME design is degenerate: every perturbation mask is identical"));
    }
    let wsum: f64 = w.iter().sum();
    let mut zbar = vec![0.0; m];
    let mut ybar = 0.0;
    for ((z, &wi), &yi) in masks.iter().zip(w).zip(y) {
        ybar += wi * yi;
        for (acc, &b) in zbar.iter_mut().zip(z) {
            *acc += wi * f64::from(u8::from(b));
        }
    }
    ybar /= wsum;
    zbar.iter_mut().for_each(|v| *v /= wsum);

    let mut ata = DMatrix::<f64>::identity(m, m) * lambda;
    let mut atb = DVector::<f64>::zeros(m);
    let mut row = vec![0.0; m];
    for ((z, &wi), &yi) in masks.iter().zip(w).zip(y) {
        for ((r, &b), &mean) in row.iter_mut().zip(z).zip(&zbar) {
            *r = f64::from(u8::from(b)) - mean;
        }
        for a in 0..m {
            atb[a] += wi * row[a] * (yi - ybar);
            for b in 0..m {
                ata[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    let beta = solve_checked(ata, atb, "LIME ridge normal equations")?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = ybar - zbar.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for ((z, &wi), &yi) in masks.iter().zip(w).zip(y) {
        let pred = intercept + z.iter().zip(&coefficients).filter(|(b, _)| **b).map(|(_, c)| c).sum::<f64>();
        ss_res += wi * (yi - pred).powi(2);
        ss_tot += wi * (yi - ybar).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    };
    Ok(LimeFit {
        coefficients,
        intercept,
        r2,
        samples: masks.len(),
    })
}

// ---------------------------------------------------------------------------
// saliency

/// `max_c |d score / d pixel|`, scaled so the largest value is 1. Returns
/// an `[H, W]` map; an all-zero gradient stays all zero.
pub fn saliency_map(model: &dyn ScoreModel, image: &Tensor, class: usize) -> Result<Tensor> {
    check_class(class)?;
    let (h, w, c) = image_dims(image)?;
    let mut tape = Tape::new();
    let input = tape.leaf(image.reshape(&[1, h, w, c])?, true);
    let score = model.class_score(&mut tape, input, class)?;
    let mut grads = tape.backward(score)?;
    let g = grads.take(input).unwrap_or_else(|| Tensor::zeros(&[1, h, w, c]));
    let mut heat: Vec<f64> = g
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    if heat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency gradient".into()));
    }
    let max = heat.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new(&[h, w], heat)
}

// ---------------------------------------------------------------------------
// explanation record and rendering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Saliency,
    Lime,
    Shap,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Saliency => "saliency",
            Method::Lime => "lime",
            Method::Shap => "shap",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Method::Saliency),
            "lime" => Ok(Method::Lime),
            "shap" => Ok(Method::Shap),
            _ => Err(Error::invalid(format!("unknown method {s:?}; use saliency, lime or shap"))),
        }
    }
}

/// Serializable result of one explanation. `values` holds per-segment
/// attributions for LIME/SHAP and the row-major heatmap for saliency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: Method,
    pub class: usize,
    pub seed: u64,
    pub phi0: Option<f64>,
    pub values: Vec<f64>,
    pub r2: Option<f64>,
    pub intercept: Option<f64>,
    pub samples: usize,
    pub segments_digest: Option<String>,
    /// `[H, W]` of the saliency heatmap.
    pub heatmap_shape: Option<[usize; 2]>,
}

impl Explanation {
    pub fn from_shap(shap: &ShapValues, class: usize, seed: u64, segments: &SegmentMap) -> Self {
        Self {
            method: Method::Shap,
            class,
            seed,
            phi0: Some(shap.phi0),
            values: shap.values.clone(),
            r2: None,
            intercept: None,
            samples: shap.coalitions,
            segments_digest: Some(segments.digest()),
            heatmap_shape: None,
        }
    }

    pub fn from_lime(fit: &LimeFit, class: usize, seed: u64, segments: &SegmentMap) -> Self {
        Self {
            method: Method::Lime,
            class,
            seed,
            phi0: None,
            values: fit.coefficients.clone(),
            r2: Some(fit.r2),
            intercept: Some(fit.intercept),
            samples: fit.samples,
            segments_digest: Some(segments.digest()),
            heatmap_shape: None,
        }
    }

    pub fn from_saliency(heatmap: &Tensor, class: usize) -> Self {
        let s = heatmap.shape();
        Self {
            method: Method::Saliency,
            class,
            seed: 0,
            phi0: None,
            values: heatmap.data().to_vec(),
            r2: None,
            intercept: None,
            samples: 1,
            segments_digest: None,
            heatmap_shape: Some([s[0], s[1]]),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const LIME_TOP_K: usize = 5;
const MAGENTA: [f64; 3] = [255.0, 0.0, 255.0];
const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);
const TINT_OPACITY: f64 = 0.4;
const SHAP_MAX_OPACITY: f64 = 0.7;

fn blend(px: &mut Rgb<u8>, color: [f64; 3], alpha: f64) {
    for (ch, c) in px.0.iter_mut().zip(color) {
        *ch = ((1.0 - alpha) * f64::from(*ch) + alpha * c).round().clamp(0.0, 255.0) as u8;
    }
}

fn check_segment_values(image: &Tensor, segments: &SegmentMap, values: &[f64]) -> Result<(usize, usize)> {
    let (h, w, _) = image_dims(image)?;
    if values.len() != segments.count() || (segments.height, segments.width) != (h, w) {
        return Err(Error::invalid(format!(
            "{} values for {} segments of a {}x{} map on a {h}x{w} image",
            values.len(),
            segments.count(),
            segments.height,
            segments.width
        )));
    }
    Ok((h, w))
}

/// Tints the `top_k` largest positive segments magenta and outlines them
/// in yellow.
pub fn render_lime(image: &Tensor, segments: &SegmentMap, values: &[f64], top_k: usize) -> Result<RgbImage> {
    let (_, w) = check_segment_values(image, segments, values)?;
    let mut order: Vec<usize> = (0..values.len()).filter(|&s| values[s] > 0.0).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let mut out = to_rgb_image(image)?;
    for &s in &order {
        for &p in segments.pixels(s) {
            let (x, y) = ((p % w) as u32, (p / w) as u32);
            if segments.is_boundary(p) {
                out.put_pixel(x, y, YELLOW);
            } else {
                blend(out.get_pixel_mut(x, y), MAGENTA, TINT_OPACITY);
            }
        }
    }
    Ok(out)
}

/// Diverging red (positive) / blue (negative) overlay, opacity proportional
/// to `|value| / max |value|`.
pub fn render_shap(image: &Tensor, segments: &SegmentMap, values: &[f64]) -> Result<RgbImage> {
    let (_, w) = check_segment_values(image, segments, values)?;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = to_rgb_image(image)?;
    if scale == 0.0 {
        return Ok(out);
    }
    for (s, &v) in values.iter().enumerate() {
        let t = v / scale;
        let color = if t > 0.0 { [255.0, 0.0, 0.0] } else { [0.0, 0.0, 255.0] };
        for &p in segments.pixels(s) {
            blend(out.get_pixel_mut((p % w) as u32, (p / w) as u32), color, SHAP_MAX_OPACITY * t.abs());
        }
    }
    Ok(out)
}

/// Black-red-yellow-white colormap on `[0, 1]`.
pub fn hot(v: f64) -> Rgb<u8> {
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0 * v), ch(3.0 * v - 1.0), ch(3.0 * v - 2.0)])
}

/// The original image with the hot-colormapped heatmap to its right.
pub fn render_saliency(image: &Tensor, heatmap: &Tensor) -> Result<RgbImage> {
    let (h, w, _) = image_dims(image)?;
    if heatmap.shape() != [h, w] {
        return Err(Error::invalid(format!("heatmap {:?} for a {h}x{w} image", heatmap.shape())));
    }
    let orig = to_rgb_image(image)?;
    let mut out = RgbImage::new(2 * w as u32, h as u32);
    image::imageops::replace(&mut out, &orig, 0, 0);
    for (p, &v) in heatmap.data().iter().enumerate() {
        out.put_pixel((w + p % w) as u32, (p / w) as u32, hot(v));
    }
    Ok(out)
}

/// Dispatches on the explanation method. Region methods need `segments`.
pub fn render_overlay(image: &Tensor, explanation: &Explanation, segments: Option<&SegmentMap>) -> Result<RgbImage> {
    match explanation.method {
        Method::Saliency => {
            let [h, w] = explanation
                .heatmap_shape
                .ok_or_else(|| Error::invalid("saliency explanation without heatmap extents"))?;
            render_saliency(image, &Tensor::new(&[h, w], explanation.values.clone())?)
        }
        Method::Lime | Method::Shap => {
            let segments = segments.ok_or_else(|| Error::invalid("region explanation needs a segment map"))?;
            if explanation.segments_digest.as_deref().is_some_and(|d| d != segments.digest()) {
                return Err(Error::invalid("segment map does not match the explanation"));
            }
            if explanation.method == Method::Lime {
                render_lime(image, segments, &explanation.values, LIME_TOP_K)
            } else {
                render_shap(image, segments, &explanation.values)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0))
    }

    /// Random game on `m` players backed by a value table.
    fn table_game(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..1usize << m).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn bits(z: &[bool]) -> usize {
        z.iter().enumerate().map(|(i, &b)| usize::from(b) << i).sum()
    }

    fn enumerate_all() -> ShapConfig {
        ShapConfig {
            enumerate_below: 64,
            ..Default::default()
        }
    }

    #[test]
    fn grid_tiles() {
        let img = Tensor::zeros(&[100, 100, 3]);
        let s = segment_image(&img, &Segmentation::Grid { cells: 2 }).unwrap();
        assert_eq!(s.count(), 4);
        for k in 0..4 {
            assert_eq!(s.pixels(k).len(), 2500);
        }
        assert_eq!(s.id_at(0, 99), 1);
        assert_eq!(s.id_at(50, 0), 2);
        let s = segment_image(&img, &Segmentation::DEFAULT_GRID).unwrap();
        assert_eq!(s.count(), 49);
        assert!(segment_image(&img, &Segmentation::Grid { cells: 0 }).is_err());
    }

    #[test]
    fn slic_on_constant_image_is_the_lattice() {
        let img = Tensor::full(&[100, 100, 3], 0.3);
        let method = Segmentation::Slic {
            target_segments: 25,
            compactness: 0.2,
            iterations: 10,
        };
        let s = segment_image(&img, &method).unwrap();
        assert_eq!(s.count(), 25);
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(s.id_at(y, x), (y / 20) * 5 + x / 20);
            }
        }
    }

    #[test]
    fn slic_covers_every_pixel_once() {
        let img = random_image(40, 30, 3);
        let s = segment_image(
            &img,
            &Segmentation::Slic {
                target_segments: 12,
                compactness: 0.2,
                iterations: 5,
            },
        )
        .unwrap();
        let total: usize = (0..s.count()).map(|k| s.pixels(k).len()).sum();
        assert_eq!(total, 1200);
        assert!((0..s.count()).all(|k| !s.pixels(k).is_empty()));
        assert!(segment_image(
            &img,
            &Segmentation::Slic {
                target_segments: 1201,
                compactness: 0.2,
                iterations: 5
            }
        )
        .is_err());
    }

    #[test]
    fn segmentation_parses() {
        assert_eq!("grid:3".parse::<Segmentation>().unwrap(), Segmentation::Grid { cells: 3 });
        assert!(matches!("slic".parse::<Segmentation>().unwrap(), Segmentation::Slic { target_segments: 50, .. }));
        assert!("voronoi".parse::<Segmentation>().is_err());
    }

    #[test]
    fn set_function_memoizes() {
        let mut f = SetFunction::from_fn(3, |z| z.iter().filter(|&&b| b).count() as f64);
        let z = vec![true, false, true];
        assert_eq!(f.value(&z).unwrap(), 2.0);
        assert_eq!(f.value(&z).unwrap(), 2.0);
        assert_eq!(f.values(&[z.clone(), z.clone(), vec![false; 3]]).unwrap(), [2.0, 2.0, 0.0]);
        assert_eq!(f.evaluations(), 2);
        assert!(f.value(&[true]).is_err());
        let mut g = f.map_values(|v| 10.0 - v);
        assert_eq!(g.value(&z).unwrap(), 8.0);
        assert_eq!(g.evaluations(), 2);
        assert_eq!(g.value(&[true; 3]).unwrap(), 7.0);
        assert_eq!(g.evaluations(), 3);
    }

    /// Probability of class 1 = mean red channel.
    struct Redness;

    impl Classifier for Redness {
        fn class_probs(&self, batch: &Tensor) -> Result<Tensor> {
            let s = batch.shape();
            let per = s[1] * s[2] * s[3];
            let mut out = Vec::new();
            for img in batch.data().chunks_exact(per) {
                let r = img.iter().step_by(3).sum::<f64>() / (s[1] * s[2]) as f64;
                out.extend([1.0 - r, r]);
            }
            Tensor::new(&[s[0], 2], out)
        }
    }

    #[test]
    fn model_set_function_masks_with_baseline() {
        let img = random_image(10, 10, 1);
        let seg = segment_image(&img, &Segmentation::Grid { cells: 2 }).unwrap();
        let mut f = make_set_function(&Redness, &img, &seg, 1, Baseline::Gray).unwrap();
        let full = f.value(&[true; 4]).unwrap();
        let direct = Redness.class_probs(&img.reshape(&[1, 10, 10, 3]).unwrap()).unwrap().data()[1];
        assert_eq!(full, direct);
        assert!((f.value(&[false; 4]).unwrap() - 0.5).abs() < 1e-15);
        // red is additive over segments, so SHAP recovers each tile's share
        let shap = kernel_shap(&mut f, &ShapConfig::default()).unwrap();
        for k in 0..4 {
            let share: f64 = seg.pixels(k).iter().map(|&p| img.data()[3 * p] - 0.5).sum::<f64>() / 100.0;
            assert!((shap.values[k] - share).abs() < 1e-12);
        }
        assert!(make_set_function(&Redness, &img, &seg, 2, Baseline::Gray).is_err());
        let mean = baseline_color(&img, Baseline::MeanColor).unwrap();
        let mut g = make_set_function(&Redness, &img, &seg, 1, Baseline::MeanColor).unwrap();
        assert!((g.value(&[false; 4]).unwrap() - mean[0]).abs() < 1e-12);
    }

    #[test]
    fn kernel_weights_by_hand() {
        assert!((shapley_kernel_weight(4, 1).unwrap() - 0.25).abs() < 1e-15);
        assert!((shapley_kernel_weight(4, 2).unwrap() - 0.125).abs() < 1e-15);
        for m in 2..20 {
            for s in 1..m {
                assert_eq!(shapley_kernel_weight(m, s).unwrap(), shapley_kernel_weight(m, m - s).unwrap());
            }
        }
        assert!(shapley_kernel_weight(4, 0).is_err());
        assert!(shapley_kernel_weight(4, 4).is_err());
    }

    #[test]
    fn exact_shapley_basics() {
        let mut f = SetFunction::from_fn(3, |z| z.iter().filter(|&&b| b).count() as f64);
        assert_eq!(exact_shapley(&mut f).unwrap(), [1.0, 1.0, 1.0]);
        // player 2 is a dummy
        let mut g = SetFunction::from_fn(3, |z| if z[0] && z[1] { 2.0 } else { 0.5 * f64::from(u8::from(z[0])) });
        let phi = exact_shapley(&mut g).unwrap();
        assert_eq!(phi[2], 0.0);
        let mut big = SetFunction::from_fn(21, |_| 0.0);
        assert!(exact_shapley(&mut big).is_err());
    }

    #[test]
    fn exact_shapley_efficiency() {
        for seed in 0..20 {
            let m = 2 + seed as usize % 7;
            let t = table_game(m, seed);
            let mut f = SetFunction::from_fn(m, |z| t[bits(z)]);
            let phi = exact_shapley(&mut f).unwrap();
            let sum: f64 = phi.iter().sum();
            assert!((sum - (t[(1 << m) - 1] - t[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_shap_additive_game_is_exact() {
        for m in 2..=12 {
            let w: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut f = SetFunction::from_fn(m, |z| z.iter().zip(&w).filter(|(b, _)| **b).map(|(_, v)| v).sum());
            let shap = kernel_shap(&mut f, &ShapConfig::default()).unwrap();
            assert!(shap.enumerated);
            for (a, b) in shap.values.iter().zip(&w) {
                assert!((a - b).abs() < 1e-10, "M={m}");
            }
        }
    }

    #[test]
    fn kernel_shap_and_game() {
        let mut f = SetFunction::from_fn(2, |z| f64::from(u8::from(z[0] && z[1])));
        let shap = kernel_shap(&mut f, &ShapConfig::default()).unwrap();
        assert_eq!(shap.phi0, 0.0);
        assert!((shap.values[0] - 0.5).abs() < 1e-12 && (shap.values[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kernel_shap_matches_exact_on_random_games() {
        for seed in 0..10 {
            let t = table_game(10, 100 + seed);
            let mut a = SetFunction::from_fn(10, |z| t[bits(z)]);
            let mut b = SetFunction::from_fn(10, |z| t[bits(z)]);
            let shap = kernel_shap(&mut a, &ShapConfig::default()).unwrap();
            let exact = exact_shapley(&mut b).unwrap();
            for (x, y) in shap.values.iter().zip(&exact) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampled_kernel_shap() {
        let m = 30;
        let w: Vec<f64> = (0..m).map(|i| (i as f64 * 0.11).cos()).collect();
        let additive = |z: &[bool]| z.iter().zip(&w).filter(|(b, _)| **b).map(|(_, v)| v).sum::<f64>();
        let cfg = ShapConfig {
            n_samples: 512,
            seed: 9,
            ..Default::default()
        };
        let mut f = SetFunction::from_fn(m, additive);
        let shap = kernel_shap(&mut f, &cfg).unwrap();
        assert!(!shap.enumerated);
        assert_eq!(shap.coalitions, 512);
        for (a, b) in shap.values.iter().zip(&w) {
            assert!((a - b).abs() < 1e-9);
        }
        let again = kernel_shap(&mut SetFunction::from_fn(m, additive), &cfg).unwrap();
        assert_eq!(shap, again);
        let starved = ShapConfig {
            n_samples: 4,
            ..cfg
        };
        assert!(matches!(
            kernel_shap(&mut SetFunction::from_fn(m, additive), &starved),
            Err(Error::Singular { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn shapley_axioms(m in 2usize..=10, seed in any::<u64>(), i in 0usize..10, j in 0usize..10, dummy in 0usize..10) {
            let (i, j, dummy) = (i % m, j % m, dummy % m);
            // symmetric in i <-> j, independent of `dummy` (unless it is i or j)
            let base = table_game(m, seed);
            let canon = |z: &[bool]| {
                let mut z = z.to_vec();
                if z[i] && !z[j] {
                    z.swap(i, j);
                }
                if dummy != i && dummy != j {
                    z[dummy] = false;
                }
                base[bits(&z)]
            };
            let shap = kernel_shap(&mut SetFunction::from_fn(m, canon), &enumerate_all()).unwrap();
            let exact = exact_shapley(&mut SetFunction::from_fn(m, canon)).unwrap();
            for (a, b) in shap.values.iter().zip(&exact) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let sum: f64 = shap.values.iter().sum();
            prop_assert!((shap.phi0 + sum - shap.full).abs() < 1e-6);
            prop_assert!((shap.values[i] - shap.values[j]).abs() < 1e-6);
            if dummy != i && dummy != j {
                prop_assert!(shap.values[dummy].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lime_constant_target() {
        let mut f = SetFunction::from_fn(8, |_| 0.7);
        let fit = lime_explain(&mut f, &LimeConfig::default()).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-8));
        assert!((fit.intercept - 0.7).abs() < 1e-8);
    }

    #[test]
    fn lime_indicator_ranks_true_segment() {
        let k = 6;
        let mut f = SetFunction::from_fn(10, |z| f64::from(u8::from(z[k])));
        let fit = lime_explain(
            &mut f,
            &LimeConfig {
                seed: 17,
                ..Default::default()
            },
        )
        .unwrap();
        let top = fit.coefficients[k];
        for (i, c) in fit.coefficients.iter().enumerate() {
            if i != k {
                assert!(top >= 5.0 * c.abs(), "{:?}", fit.coefficients);
            }
        }
    }

    /// Gauss-Jordan with partial pivoting.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    #[test]
    fn lime_matches_augmented_normal_equations() {
        let m = 5;
        let game = |z: &[bool]| {
            let x: Vec<f64> = z.iter().map(|&b| f64::from(u8::from(b))).collect();
            0.2 + 0.5 * x[0] - 0.3 * x[3] + 0.4 * x[1] * x[2] + 0.1 * x[4] * x[0]
        };
        let cfg = LimeConfig {
            n_samples: 300,
            seed: 5,
            ..Default::default()
        };
        let fit = lime_explain(&mut SetFunction::from_fn(m, game), &cfg).unwrap();

        // design [1, z]; penalty lambda on every coefficient except the intercept
        let masks = lime_masks(m, cfg.n_samples, cfg.seed);
        let mut a = vec![vec![0.0; m + 1]; m + 1];
        let mut b = vec![0.0; m + 1];
        for z in &masks {
            let w = lime_kernel(z, cfg.kernel_width);
            let mut row = vec![1.0];
            row.extend(z.iter().map(|&v| f64::from(u8::from(v))));
            for r in 0..=m {
                b[r] += w * row[r] * game(z);
                for c in 0..=m {
                    a[r][c] += w * row[r] * row[c];
                }
            }
        }
        for d in 1..=m {
            a[d][d] += cfg.ridge;
        }
        let oracle = gauss_solve(a, b);
        assert!((fit.intercept - oracle[0]).abs() < 1e-8);
        for (c, o) in fit.coefficients.iter().zip(&oracle[1..]) {
            assert!((c - o).abs() < 1e-8);
        }
        assert!(fit.r2 > 0.0 && fit.r2 <= 1.0);
    }

    #[test]
    fn lime_rejects_bad_inputs() {
        let masks = vec![vec![true, false]; 4];
        assert!(weighted_ridge(&masks, &[1.0; 4], &[1.0; 4], 1.0).is_err());
        let mut f = SetFunction::from_fn(1, |_| 0.0);
        assert!(lime_explain(&mut f, &LimeConfig::default()).is_err());
        let mut g = SetFunction::from_fn(10, |_| 0.0);
        let few = LimeConfig {
            n_samples: 9,
            ..Default::default()
        };
        assert!(lime_explain(&mut g, &few).is_err());
    }

    struct FnScore<F>(F);

    impl<F: Fn(&mut Tape, Var, usize) -> Result<Var>> ScoreModel for FnScore<F> {
        fn class_score(&self, tape: &mut Tape, input: Var, class: usize) -> Result<Var> {
            (self.0)(tape, input, class)
        }
    }

    fn channel0_mean(tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let mask = tape.constant(Tensor::from_fn(&shape, |i| f64::from(i % 3 == 0)));
        let y = tape.mul(x, mask)?;
        Ok(tape.mean_all(y))
    }

    #[test]
    fn saliency_of_simple_scores() {
        let img = random_image(6, 5, 2);
        let constant = FnScore(|tape: &mut Tape, _x: Var, _c: usize| Ok(tape.constant(Tensor::scalar(3.0))));
        assert!(saliency_map(&constant, &img, 0).unwrap().data().iter().all(|&v| v == 0.0));

        let mean = FnScore(|tape: &mut Tape, x: Var, _c: usize| channel0_mean(tape, x));
        let heat = saliency_map(&mean, &img, 0).unwrap();
        assert_eq!(heat.shape(), [6, 5]);
        assert!(heat.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let squares = FnScore(|tape: &mut Tape, x: Var, _c: usize| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        });
        let shifted = FnScore(|tape: &mut Tape, x: Var, _c: usize| {
            let sq = tape.mul(x, x)?;
            let s = tape.sum_all(sq);
            Ok(tape.offset(s, 42.0))
        });
        assert_eq!(saliency_map(&squares, &img, 1).unwrap(), saliency_map(&shifted, &img, 1).unwrap());
        assert!(saliency_map(&squares, &img, 2).is_err());
    }

    #[test]
    fn model_saliency_matches_finite_differences() {
        let model = ModelGraph::new(
            ArchitectureConfig {
                input_size: [12, 12, 3],
                block_filters: vec![4, 8],
                dense_units: vec![6],
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let img = random_image(12, 12, 8);
        let class = 0;
        let heat = saliency_map(&model, &img, class).unwrap();
        let max = heat.data().iter().copied().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-15);

        let score = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x.reshape(&[1, 12, 12, 3]).unwrap());
            let s = model.class_score(&mut tape, v, class).unwrap();
            tape.value(s).item().unwrap()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(img.reshape(&[1, 12, 12, 3]).unwrap(), true);
        let s = model.class_score(&mut tape, v, class).unwrap();
        let grad = tape.backward(s).unwrap().take(v).unwrap();
        let eps = 1e-5;
        for p in [0usize, 40, 77, 143] {
            let mut fd = [0.0; 3];
            for (ch, slot) in fd.iter_mut().enumerate() {
                let i = p * 3 + ch;
                let (mut up, mut dn) = (img.clone(), img.clone());
                up.data_mut()[i] += eps;
                dn.data_mut()[i] -= eps;
                *slot = (score(&up) - score(&dn)) / (2.0 * eps);
                let a = grad.data()[i];
                assert!((a - *slot).abs() <= 1e-6 * a.abs().max(slot.abs()).max(1e-8) + 1e-9);
            }
        }
    }

    #[test]
    fn sigmoid_head_scores_are_negated() {
        let model = ModelGraph::new(
            ArchitectureConfig {
                input_size: [8, 8, 3],
                block_filters: vec![4],
                dense_units: vec![4],
                head: Head::Sigmoid1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let img = random_image(8, 8, 1);
        let mut tape = Tape::new();
        let x = tape.constant(img.reshape(&[1, 8, 8, 3]).unwrap());
        let s0 = model.class_score(&mut tape, x, 0).unwrap();
        let s1 = model.class_score(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(s0).item().unwrap(), -tape.value(s1).item().unwrap());
        let p = model.class_probs(&img.reshape(&[1, 8, 8, 3]).unwrap()).unwrap();
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overlays() {
        let img = random_image(10, 10, 4);
        let seg = segment_image(&img, &Segmentation::Grid { cells: 2 }).unwrap();
        let orig = to_rgb_image(&img).unwrap();
        assert_eq!(render_lime(&img, &seg, &[0.0; 4], 5).unwrap(), orig);
        assert_eq!(render_shap(&img, &seg, &[0.0; 4]).unwrap(), orig);

        let lime = render_lime(&img, &seg, &[0.0, 0.3, -0.2, 0.0], 5).unwrap();
        for p in 0..100 {
            let (x, y) = ((p % 10) as u32, (p / 10) as u32);
            let changed = lime.get_pixel(x, y) != orig.get_pixel(x, y);
            assert_eq!(changed, seg.ids()[p] == 1, "pixel {p}");
        }

        let flat = Tensor::full(&[10, 10, 3], 0.5);
        let shap = render_shap(&flat, &seg, &[0.4, -0.4, 0.0, 0.0]).unwrap();
        let (red, blue) = (shap.get_pixel(0, 0).0, shap.get_pixel(9, 0).0);
        assert_eq!(red[0], blue[2]);
        assert_eq!(red[2], blue[0]);
        assert!(red[0] > red[2]);
        assert_eq!(shap.get_pixel(0, 9), &Rgb([128, 128, 128]));
        assert!(render_shap(&img, &seg, &[0.1; 3]).is_err());

        let heat = Tensor::from_fn(&[10, 10], |i| i as f64 / 99.0);
        let sal = render_saliency(&img, &heat).unwrap();
        assert_eq!(sal.dimensions(), (20, 10));
        assert_eq!(sal.get_pixel(3, 4), orig.get_pixel(3, 4));
        assert_eq!(sal.get_pixel(10, 0), &Rgb([0, 0, 0]));
        assert_eq!(sal.get_pixel(19, 9), &Rgb([255, 255, 255]));
        let e = Explanation::from_saliency(&heat, 0);
        assert_eq!(render_overlay(&img, &e, None).unwrap(), sal);
        let l = Explanation {
            method: Method::Lime,
            values: vec![0.1; 4],
            segments_digest: Some("0".into()),
            ..e
        };
        assert!(render_overlay(&img, &l, Some(&seg)).is_err());
    }

    #[test]
    fn explanation_json_fields() {
        let seg = segment_image(&Tensor::zeros(&[4, 4, 3]), &Segmentation::Grid { cells: 2 }).unwrap();
        let shap = ShapValues {
            phi0: 0.25,
            values: vec![0.1, 0.2, 0.3, 0.15],
            full: 1.0,
            coalitions: 14,
            enumerated: true,
        };
        let e = Explanation::from_shap(&shap, 1, 7, &seg);
        let v: serde_json::Value = serde_json::from_str(&e.to_json().unwrap()).unwrap();
        for key in ["method", "class", "seed", "phi0", "values", "r2", "segments_digest"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["method"], "shap");
        assert_eq!(v["segments_digest"].as_str().unwrap().len(), 64);
        let back: Explanation = serde_json::from_str(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
