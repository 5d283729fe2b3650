//! Masked-region selection, coordinate corruption and the refinement loss.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::structure::{backbone_frame, BackboneAtom, BackboneCoords, Complex, Mutation, NUM_BACKBONE_ATOMS};

pub const DEFAULT_FLANK: usize = 5;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_NOISE_STD: f64 = 0.5;

/// Maximal run of consecutive masked residues within one chain, `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// A residue precedes the segment in its chain.
    pub left_anchor: bool,
    /// A residue follows the segment in its chain.
    pub right_anchor: bool,
}

impl Segment {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRegion {
    indices: BTreeSet<usize>,
    segments: Vec<Segment>,
}

impl MaskRegion {
    /// Region covering `indices`, split into per-chain segments.
    pub fn from_indices(c: &Complex, indices: BTreeSet<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Mask("mask region is empty".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= c.len()) {
            return Err(Error::Mask(format!("index {i} outside {} residues", c.len())));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for &i in &indices {
            let chain = c.chain_range(i);
            match segments.last_mut() {
                Some(s) if s.end + 1 == i && chain.contains(&s.end) => s.end = i,
                _ => segments.push(Segment { start: i, end: i, left_anchor: i > chain.start, right_anchor: false }),
            }
        }
        for s in &mut segments {
            s.right_anchor = s.end + 1 < c.chain_range(s.end).end;
        }
        Ok(MaskRegion { indices, segments })
    }

    pub fn indices(&self) -> &BTreeSet<usize> {
        &self.indices
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }
}

/// Residues `center−l ..= center+r`, clipped to the chain of `center`.
pub fn window(c: &Complex, center: usize, l: usize, r: usize) -> BTreeSet<usize> {
    let chain = c.chain_range(center);
    let lo = center.saturating_sub(l).max(chain.start);
    let hi = (center + r).min(chain.end - 1);
    (lo..=hi).collect()
}

/// Union of the windows around every mutation site.
pub fn select_mask_region(c: &Complex, muts: &[Mutation], l: usize, r: usize) -> Result<MaskRegion> {
    if muts.is_empty() {
        return Err(Error::Mask("no mutations given".into()));
    }
    let mut indices = BTreeSet::new();
    for m in muts {
        indices.extend(window(c, m.resolve(c)?, l, r));
    }
    MaskRegion::from_indices(c, indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Independent Gaussian noise with this per-axis standard deviation (Å).
    Noise(f64),
    /// Even spacing between the flanking residues, or extrapolation from one side.
    Interpolate,
}

impl Default for CorruptionMode {
    fn default() -> Self {
        CorruptionMode::Interpolate
    }
}

pub fn corrupt(coords: &BackboneCoords, c: &Complex, region: &MaskRegion, mode: CorruptionMode, seed: u64) -> Result<BackboneCoords> {
    match mode {
        CorruptionMode::Noise(alpha) => corrupt_noise(coords, region, alpha, seed),
        CorruptionMode::Interpolate => corrupt_interpolate(coords, c, region),
    }
}

/// Adds `N(0, α²I)` to every present atom of the masked residues.
///
/// Draws are expressed in each residue's backbone frame, which leaves their
/// distribution unchanged and makes the corruption commute with rigid motions
/// for a fixed seed.
pub fn corrupt_noise(coords: &BackboneCoords, region: &MaskRegion, alpha: f64, seed: u64) -> Result<BackboneCoords> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("noise std must be positive, got {alpha}")));
    }
    let normal = Normal::new(0.0, alpha).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = coords.clone();
    for &i in region.indices() {
        let row = out.get_mut(i).ok_or_else(|| Error::Mask(format!("index {i} outside coordinates")))?;
        let frame = backbone_frame(row).unwrap_or_else(Mat3::identity);
        for atom in row.iter_mut().flatten() {
            *atom += frame * Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(out)
}

fn anchor(coords: &BackboneCoords, i: usize, channel: usize) -> Vec3 {
    coords[i][channel].unwrap_or_else(|| coords[i][BackboneAtom::CA.index()].expect("usable residue has CA"))
}

/// Re-initializes every masked segment from its flanking residues, channel by channel.
///
/// With both neighbours present the masked residues are spaced evenly on the
/// line between them. With only one neighbour, the step between that
/// neighbour and the next residue outward is repeated inward. An anchor atom
/// missing from its residue (glycine CB) is replaced by the anchor's CA.
pub fn corrupt_interpolate(coords: &BackboneCoords, c: &Complex, region: &MaskRegion) -> Result<BackboneCoords> {
    if coords.len() != c.len() {
        return Err(Error::Mask(format!("{} coordinate rows for {} residues", coords.len(), c.len())));
    }
    let mut out = coords.clone();
    for seg in region.segments() {
        let chain = c.chain_range(seg.start);
        for i in seg.start..=seg.end {
            for ch in 0..NUM_BACKBONE_ATOMS {
                if coords[i][ch].is_none() {
                    continue;
                }
                let x = match (seg.left_anchor, seg.right_anchor) {
                    (true, true) => {
                        let (a, b) = (anchor(coords, seg.start - 1, ch), anchor(coords, seg.end + 1, ch));
                        let steps = (seg.len() + 1) as f64;
                        a + (i - seg.start + 1) as f64 * ((b - a) / steps)
                    }
                    (false, true) => {
                        let next = seg.end + 1;
                        if next + 1 >= chain.end {
                            return Err(Error::Mask(format!("segment {}..={} has a single flanking residue and no second anchor", seg.start, seg.end)));
                        }
                        let (a, b) = (anchor(coords, next, ch), anchor(coords, next + 1, ch));
                        a - (next - i) as f64 * (b - a)
                    }
                    (true, false) => {
                        let prev = seg.start - 1;
                        if prev == chain.start {
                            return Err(Error::Mask(format!("segment {}..={} has a single flanking residue and no second anchor", seg.start, seg.end)));
                        }
                        let (a, b) = (anchor(coords, prev, ch), anchor(coords, prev - 1, ch));
                        a + (i - prev) as f64 * (a - b)
                    }
                    (false, false) => {
                        return Err(Error::Mask(format!("segment {}..={} covers its whole chain", seg.start, seg.end)));
                    }
                };
                out[i][ch] = Some(x);
            }
        }
    }
    Ok(out)
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean over masked residues of the per-residue mean Huber loss of atom displacement norms.
pub fn refine_loss(pred: &BackboneCoords, truth: &BackboneCoords, region: &MaskRegion, delta: f64) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Mask("mask region is empty".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape { op: "refine_loss", detail: format!("{} vs {} residues", pred.len(), truth.len()) });
    }
    let mut total = 0.0;
    for &i in region.indices() {
        let (mut sum, mut n) = (0.0, 0usize);
        for ch in 0..NUM_BACKBONE_ATOMS {
            if let (Some(p), Some(t)) = (pred[i][ch], truth[i][ch]) {
                sum += huber((p - t).norm(), delta);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Mask(format!("residue {i} has no comparable atoms")));
        }
        total += sum / n as f64;
    }
    Ok(total / region.len() as f64)
}

/// Mean CA displacement over the region.
pub fn ca_error(pred: &BackboneCoords, truth: &BackboneCoords, region: &MaskRegion) -> f64 {
    let ca = BackboneAtom::CA.index();
    let sum: f64 = region.indices().iter().map(|&i| (pred[i][ca].unwrap() - truth[i][ca].unwrap()).norm()).sum();
    sum / region.len() as f64
}
