//! Seeded generator of bi-temporal scene pairs in three modality regimes,
//! plus split manifests and a raw sample cache.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Gamma};

use crate::error::{ensure, Error, Result};
use crate::params::DomainId;
use crate::rng::{derive_seed, Xoshiro256};
use crate::tensor::Tensor;

pub const SPECKLE_VARIANCE: f64 = 0.3;
pub const MAX_SHIFT: i64 = 3;
pub const OPT_NOISE_STD: f64 = 0.02;
pub const PLACEMENT_ATTEMPTS: usize = 100;
pub const CHANGE_TOLERANCE: f64 = 0.05;

/// Modality regime of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Optical/optical, independent mild sensor noise.
    OptOpt,
    /// Optical/UAV: epoch 2 translated and re-exposed.
    OptUav,
    /// Optical/SAR: epoch 2 intensity-only with multiplicative speckle.
    OptSar,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::OptOpt, Modality::OptUav, Modality::OptSar];

    pub fn id(self) -> DomainId {
        DomainId(self as usize)
    }

    pub fn from_id(id: DomainId) -> Result<Self> {
        Self::ALL.get(id.0).copied().ok_or(Error::UnknownDomain(id.0))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::OptOpt => "OPT_OPT",
            Modality::OptUav => "OPT_UAV",
            Modality::OptSar => "OPT_SAR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "OPT_OPT" | "0" => Ok(Modality::OptOpt),
            "OPT_UAV" | "1" => Ok(Modality::OptUav),
            "OPT_SAR" | "2" => Ok(Modality::OptSar),
            _ => Err(Error::Usage(format!("unknown domain {s:?} (expected OPT_OPT, OPT_UAV or OPT_SAR)"))),
        }
    }
}

/// Everything that determines one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: (usize, usize),
    /// Base objects in epoch 1; drawn from [3, 8] when `None`.
    pub n_objects: Option<usize>,
    /// Target changed-pixel fraction; drawn from [0.05, 0.25] when `None`.
    /// `Some(0.0)` produces an unchanged pair.
    pub change_fraction: Option<f64>,
    pub domain: Modality,
    /// Apply the domain corruption (noise, misalignment, speckle).
    pub corrupt: bool,
    /// Overrides the random epoch-2 translation `(dx, dy)` of OPT_UAV.
    pub shift: Option<(i64, i64)>,
}

impl SceneSpec {
    pub fn new(seed: u64, domain: Modality) -> Self {
        Self {
            seed,
            size: (64, 64),
            n_objects: None,
            change_fraction: None,
            domain,
            corrupt: true,
            shift: None,
        }
    }
}

/// A bi-temporal pair with its change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// `[3, H, W]` in [0, 1].
    pub t1: Tensor,
    pub t2: Tensor,
    /// `[1, H, W]`, 1 = changed.
    pub gt: Tensor,
    pub domain: DomainId,
    pub seed: u64,
}

impl SamplePair {
    pub fn change_fraction(&self) -> f64 {
        self.gt.mean()
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.hw && v.abs() <= self.hh
    }

}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64, [f64; 3])>,
    grain_seed: u64,
}

impl Background {
    fn new(rng: &mut Xoshiro256) -> Self {
        let base = [rng.range_f64(0.25, 0.45), rng.range_f64(0.3, 0.5), rng.range_f64(0.2, 0.4)];
        // Four broad undulations plus four finer ripples.
        let waves = (0..8)
            .map(|i| {
                let band = if i < 4 { 0.25 } else { 0.9 };
                let fx = rng.range_f64(-band, band);
                let fy = rng.range_f64(-band, band);
                let phase = rng.range_f64(0.0, std::f64::consts::TAU);
                let amp = rng.range_f64(0.02, 0.05);
                let tint = [rng.range_f64(0.5, 1.0), rng.range_f64(0.5, 1.0), rng.range_f64(0.5, 1.0)];
                (fx, fy, phase, amp, tint)
            })
            .collect();
        Self {
            base,
            waves,
            grain_seed: rng.next(),
        }
    }

    /// Texture value at integer scene coordinates; defined everywhere so a
    /// translated view never needs padding.
    fn at(&self, x: i64, y: i64) -> [f64; 3] {
        let mut c = self.base;
        for &(fx, fy, phase, amp, tint) in &self.waves {
            let s = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for k in 0..3 {
                c[k] += s * tint[k];
            }
        }
        let mut h = self.grain_seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let grain = (crate::rng::splitmix64(&mut h) >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        for v in &mut c {
            *v += 0.12 * grain;
        }
        c
    }
}

/// Object dimensions are tuned for 64×64 scenes and scale linearly with
/// the shorter side.
fn scene_scale(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 64.0
}

/// Positions tried per placement attempt before giving up on a shape.
const POSITION_TRIES: usize = 32;

/// One placement attempt: draws a shape whose area fits `max_area`, then
/// looks for a free position. Returns the object and its footprint.
fn place(rng: &mut Xoshiro256, occupancy: &Occupancy, max_area: f64) -> Option<(Rect, Vec<bool>)> {
    let (h, w) = (occupancy.h, occupancy.w);
    let side_max = (24.0 * scene_scale(h, w)).min(max_area.sqrt() * 1.6);
    if side_max < 4.0 {
        return None;
    }
    let sw = rng.range_f64(4.0, side_max);
    let sh = rng.range_f64(4.0, side_max).min(max_area / sw).max(3.0);
    let angle = if rng.uniform() < 0.3 { rng.range_f64(0.0, std::f64::consts::FRAC_PI_2) } else { 0.0 };
    // Half extents of the rotated shape's bounding box.
    let (c, s) = (angle.cos(), angle.sin());
    let ex = 0.5 * (sw * c + sh * s);
    let ey = 0.5 * (sw * s + sh * c);
    let (lo_x, hi_x) = (ex + 1.0, w as f64 - ex - 1.0);
    let (lo_y, hi_y) = (ey + 1.0, h as f64 - ey - 1.0);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    let bright = rng.uniform() < 0.6;
    let tone = if bright { rng.range_f64(0.7, 0.95) } else { rng.range_f64(0.03, 0.15) };
    let color = [
        (tone + rng.range_f64(-0.05, 0.05)).clamp(0.0, 1.0),
        (tone + rng.range_f64(-0.05, 0.05)).clamp(0.0, 1.0),
        (tone + rng.range_f64(-0.05, 0.05)).clamp(0.0, 1.0),
    ];
    for _ in 0..POSITION_TRIES {
        let rect = Rect {
            cx: rng.range_f64(lo_x, hi_x),
            cy: rng.range_f64(lo_y, hi_y),
            hw: 0.5 * sw,
            hh: 0.5 * sh,
            cos: angle.cos(),
            sin: angle.sin(),
            color,
        };
        let fp = footprint(&rect, h, w);
        if occupancy.free(&fp) {
            return Some((rect, fp));
        }
    }
    None
}

/// Pixel occupancy of placed objects, used to keep them one pixel apart.
struct Occupancy {
    h: usize,
    w: usize,
    taken: Vec<bool>,
}

impl Occupancy {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, taken: vec![false; h * w] }
    }

    fn free(&self, fp: &[bool]) -> bool {
        let (h, w) = (self.h, self.w);
        for y in 0..h {
            for x in 0..w {
                if !fp[y * w + x] {
                    continue;
                }
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        if self.taken[yy * w + xx] {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn mark(&mut self, fp: &[bool]) {
        for (t, &f) in self.taken.iter_mut().zip(fp) {
            *t |= f;
        }
    }
}

fn footprint(r: &Rect, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            m[y * w + x] = r.contains(x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    m
}

/// Renders the scene at integer scene coordinates shifted by `(ox, oy)`:
/// output pixel `(x, y)` shows scene point `(x − ox, y − oy)`.
fn render(bg: &Background, objects: &[Rect], h: usize, w: usize, ox: i64, oy: i64) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x as i64 - ox, y as i64 - oy);
            let (fx, fy) = (sx as f64 + 0.5, sy as f64 + 0.5);
            let c = objects.iter().find(|r| r.contains(fx, fy)).map_or_else(|| bg.at(sx, sy), |r| r.color);
            for k in 0..3 {
                out[k * plane + y * w + x] = c[k];
            }
        }
    }
    out
}

/// Multiplicative speckle with mean 1 and variance [`SPECKLE_VARIANCE`].
#[derive(Debug, Clone, Copy)]
pub struct Speckle {
    gamma: Gamma<f64>,
}

impl Default for Speckle {
    fn default() -> Self {
        Self::new(SPECKLE_VARIANCE)
    }
}

impl Speckle {
    /// Gamma with shape `1/variance` and scale `variance`.
    pub fn new(variance: f64) -> Self {
        Self {
            gamma: Gamma::new(1.0 / variance, variance).expect("positive speckle variance"),
        }
    }

    pub fn sample(&self, rng: &mut Xoshiro256) -> f64 {
        self.gamma.sample(rng)
    }
}

/// Generates one pair. A pure function of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SamplePair> {
    let (h, w) = spec.size;
    ensure!(h >= 16 && w >= 16, "scene size {}x{} too small", h, w);
    let mut rng = Xoshiro256::seed_from(derive_seed(spec.seed, 0x5CE0 + spec.domain as u64));
    let n_pix = (h * w) as f64;
    let area_scale = scene_scale(h, w).powi(2);
    let bg = Background::new(&mut rng);
    let n_objects = spec.n_objects.unwrap_or_else(|| rng.range_i64(3, 8) as usize);
    let target = match spec.change_fraction {
        Some(f) => {
            ensure!((0.0..1.0).contains(&f), "change fraction {} outside [0, 1)", f);
            f
        }
        None => rng.range_f64(0.05, 0.25),
    };

    let mut occupancy = Occupancy::new(h, w);
    let mut base: Vec<Rect> = Vec::with_capacity(n_objects);
    let mut tries = 0;
    while base.len() < n_objects && tries < 4 * n_objects {
        tries += 1;
        if let Some((r, fp)) = place(&mut rng, &occupancy, 144.0 * area_scale) {
            occupancy.mark(&fp);
            base.push(r);
        }
    }

    // Changes: remove base objects or add new ones until the changed area
    // reaches the target. Objects never overlap, so the changed region is
    // the union of the removed and added footprints.
    let mut removed = vec![false; base.len()];
    let mut added: Vec<Rect> = Vec::new();
    let mut changed = vec![false; h * w];
    let mut realized = 0.0;
    let mut attempts = 0;
    while target > 0.0 && realized < target - 0.01 && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let budget = (target + 0.03 - realized) * n_pix;
        let candidates: Vec<usize> = (0..base.len()).filter(|&i| !removed[i]).collect();
        // Removals are capped at half the scene so both epochs keep shared
        // structure; the cap lifts once additions stall.
        let can_remove = !candidates.is_empty() && (base.len() - candidates.len() < base.len() / 2 || attempts > PLACEMENT_ATTEMPTS / 2);
        let fp = if can_remove && rng.uniform() < 0.4 {
            let i = candidates[rng.below(candidates.len())];
            let fp = footprint(&base[i], h, w);
            if fp.iter().filter(|&&b| b).count() as f64 > budget {
                continue;
            }
            removed[i] = true;
            fp
        } else {
            let Some((r, fp)) = place(&mut rng, &occupancy, budget.min(576.0 * area_scale)) else { continue };
            if fp.iter().filter(|&&b| b).count() as f64 > budget {
                continue;
            }
            occupancy.mark(&fp);
            added.push(r);
            fp
        };
        for (c, f) in changed.iter_mut().zip(fp) {
            *c |= f;
        }
        realized = changed.iter().filter(|&&b| b).count() as f64 / n_pix;
    }
    if (realized - target).abs() > CHANGE_TOLERANCE {
        return Err(Error::Generation(format!(
            "seed {}: change fraction {:.3} unattainable (reached {:.3} after {} attempts)",
            spec.seed, target, realized, attempts
        )));
    }

    let epoch1: Vec<Rect> = base.clone();
    let epoch2: Vec<Rect> = base.iter().zip(&removed).filter(|(_, &r)| !r).map(|(r, _)| *r).chain(added.iter().copied()).collect();
    let mut crng = Xoshiro256::seed_from(derive_seed(spec.seed, 0xC0FF + spec.domain as u64));
    let mut t1 = render(&bg, &epoch1, h, w, 0, 0);
    let mut t2;
    match spec.domain {
        Modality::OptOpt => {
            t2 = render(&bg, &epoch2, h, w, 0, 0);
            if spec.corrupt {
                for v in t1.iter_mut().chain(t2.iter_mut()) {
                    *v += OPT_NOISE_STD * crng.normal();
                }
            }
        }
        Modality::OptUav => {
            let (dx, dy) = spec.shift.unwrap_or_else(|| (crng.range_i64(-MAX_SHIFT, MAX_SHIFT), crng.range_i64(-MAX_SHIFT, MAX_SHIFT)));
            let gain = crng.range_f64(0.8, 1.2);
            if spec.corrupt {
                t2 = render(&bg, &epoch2, h, w, dx, dy);
                t2.iter_mut().for_each(|v| *v *= gain);
            } else {
                t2 = render(&bg, &epoch2, h, w, 0, 0);
            }
        }
        Modality::OptSar => {
            let rgb = render(&bg, &epoch2, h, w, 0, 0);
            let plane = h * w;
            let speckle = Speckle::default();
            t2 = vec![0.0; 3 * plane];
            for j in 0..plane {
                let lum = 0.299 * rgb[j] + 0.587 * rgb[plane + j] + 0.114 * rgb[2 * plane + j];
                let v = if spec.corrupt { lum * speckle.sample(&mut crng) } else { lum };
                for k in 0..3 {
                    t2[k * plane + j] = v;
                }
            }
        }
    }
    for v in t1.iter_mut().chain(t2.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SamplePair {
        t1: Tensor::new(vec![3, h, w], t1)?,
        t2: Tensor::new(vec![3, h, w], t2)?,
        gt: Tensor::new(vec![1, h, w], changed.iter().map(|&b| f64::from(u8::from(b))).collect())?,
        domain: spec.domain.id(),
        seed: spec.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-domain split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const DEFAULT: SplitCounts = SplitCounts { train: 200, val: 40, test: 40 };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// A contiguous block of seeds assigned to one domain and split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub domain: Modality,
    pub split: Split,
    pub start: u64,
    pub count: usize,
}

/// Seed stride between consecutive (domain, split) blocks.
pub const SEED_BLOCK: u64 = 100_000;

/// The standard layout: block `(domain, split)` starts at
/// `base + (3·domain + split) · SEED_BLOCK`.
pub fn standard_ranges(base: u64, counts: &[(Modality, SplitCounts)]) -> Vec<SeedRange> {
    let mut out = Vec::new();
    for &(domain, c) in counts {
        for (si, split) in Split::ALL.into_iter().enumerate() {
            out.push(SeedRange {
                domain,
                split,
                start: base + (3 * domain as u64 + si as u64) * SEED_BLOCK,
                count: c.get(split),
            });
        }
    }
    out
}

/// One manifest line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub seed: u64,
    pub domain: Modality,
    pub split: Split,
}

impl Record {
    pub fn spec(&self, size: (usize, usize)) -> SceneSpec {
        SceneSpec {
            size,
            ..SceneSpec::new(self.seed, self.domain)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

/// Builds a manifest from seed ranges, rejecting any seed reuse.
pub fn make_split(ranges: &[SeedRange]) -> Result<Manifest> {
    for (i, a) in ranges.iter().enumerate() {
        for b in &ranges[i + 1..] {
            let (a_end, b_end) = (a.start + a.count as u64, b.start + b.count as u64);
            ensure!(
                a.count == 0 || b.count == 0 || a_end <= b.start || b_end <= a.start,
                "seed ranges {}:{} [{}, {}) and {}:{} [{}, {}) overlap",
                a.domain,
                a.split,
                a.start,
                a_end,
                b.domain,
                b.split,
                b.start,
                b_end
            );
        }
    }
    let records = ranges
        .iter()
        .flat_map(|r| (0..r.count as u64).map(move |i| Record { seed: r.start + i, domain: r.domain, split: r.split }))
        .collect();
    Ok(Manifest { records })
}

impl Manifest {
    /// Default benchmark: every domain 200/40/40, or 60 OPT_SAR training
    /// pairs when `scarce_sar` is set.
    pub fn standard(base_seed: u64, scarce_sar: bool) -> Self {
        let counts: Vec<(Modality, SplitCounts)> = Modality::ALL
            .into_iter()
            .map(|m| {
                let c = if scarce_sar && m == Modality::OptSar { SplitCounts { train: 60, ..SplitCounts::DEFAULT } } else { SplitCounts::DEFAULT };
                (m, c)
            })
            .collect();
        make_split(&standard_ranges(base_seed, &counts)).expect("standard ranges are disjoint")
    }

    pub fn select(&self, split: Split, domain: Option<Modality>) -> Vec<Record> {
        self.records.iter().filter(|r| r.split == split && domain.is_none_or(|d| r.domain == d)).copied().collect()
    }

    pub fn count(&self, split: Split, domain: Modality) -> usize {
        self.records.iter().filter(|r| r.split == split && r.domain == domain).count()
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{}\t{}\t{}\n", r.seed, r.domain as usize, r.split)).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |d: &str| Error::format("manifest", format!("line {}: {d}", n + 1));
            let mut it = line.split('\t');
            let (Some(seed), Some(domain), Some(split), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad("expected seed<TAB>domain_id<TAB>split"));
            };
            let seed = seed.parse().map_err(|_| bad("bad seed"))?;
            let domain_id: usize = domain.parse().map_err(|_| bad("bad domain id"))?;
            let domain = Modality::from_id(DomainId(domain_id))?;
            let split = split.parse().map_err(|_| bad("bad split"))?;
            records.push(Record { seed, domain, split });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Generates every record of a split in manifest order.
    pub fn materialize(&self, split: Split, size: (usize, usize)) -> Result<Vec<SamplePair>> {
        self.select(split, None).iter().map(|r| generate(&r.spec(size))).collect()
    }
}

pub const CACHE_MAGIC: &[u8; 8] = b"URSD0001";

/// Writes samples as raw little-endian `f64` tensors behind an 8-byte
/// magic and a shape prefix.
pub fn write_cache(path: &Path, samples: &[SamplePair]) -> Result<()> {
    let (h, w) = match samples.first() {
        Some(s) => (s.gt.shape()[1], s.gt.shape()[2]),
        None => (0, 0),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    for v in [samples.len() as u32, 3, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        ensure!(s.gt.shape() == [1, h, w], "cache: samples differ in size");
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&(s.domain.0 as u32).to_le_bytes());
        for v in s.t1.data().iter().chain(s.t2.data()).chain(s.gt.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::model::write_atomic(path, &out)
}

pub fn read_cache(path: &Path) -> Result<Vec<SamplePair>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format("sample cache", d.to_string());
    if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    ensure!(c == 3, "sample cache: {} channels", c);
    let per = 12 + 8 * (2 * c * h * w + h * w);
    if bytes.len() != 24 + n * per {
        return Err(bad("length does not match header"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let o = 24 + i * per;
        let seed = u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let domain = DomainId(u32_at(o + 8));
        Modality::from_id(domain)?;
        let vals: Vec<f64> = bytes[o + 12..o + per].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let (a, rest) = vals.split_at(c * h * w);
        let (b, g) = rest.split_at(c * h * w);
        out.push(SamplePair {
            t1: Tensor::new(vec![c, h, w], a.to_vec())?,
            t2: Tensor::new(vec![c, h, w], b.to_vec())?,
            gt: Tensor::new(vec![1, h, w], g.to_vec())?,
            domain,
            seed,
        });
    }
    Ok(out)
}
