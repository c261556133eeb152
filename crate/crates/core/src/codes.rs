//! Hierarchical binary codes for 2D keypoint locations inside a square RoI.
//!
//! A `2^d × 2^d` grid covers the RoI. Each keypoint carries a visibility bit
//! `b_v` and two `d`-bit codes (`b_x`, `b_y`, most significant bit first)
//! naming the cell that contains its projection. The first `j` bits of each
//! code name the level-`j` ancestor cell, so codes can be predicted and
//! decoded coarse to fine.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported code depth.
pub const MAX_DEPTH: u32 = 16;

/// Grid bookkeeping for an RoI of `roi_size` pixels split `depth` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub roi_size: u32,
    pub depth: u32,
    pub base_depth: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            roi_size: 256,
            depth: 6,
            base_depth: 3,
        }
    }
}

impl GridSpec {
    pub fn new(roi_size: u32, depth: u32, base_depth: u32) -> Result<Self> {
        let g = Self {
            roi_size,
            depth,
            base_depth,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::invalid(format!("depth {} outside 1..={MAX_DEPTH}", self.depth)));
        }
        if self.base_depth == 0 || self.base_depth > self.depth {
            return Err(Error::invalid(format!(
                "base depth {} must lie in 1..={}",
                self.base_depth, self.depth
            )));
        }
        if self.roi_size == 0 || self.roi_size % (1 << self.depth) != 0 {
            return Err(Error::invalid(format!(
                "roi size {} is not divisible by 2^{}",
                self.roi_size, self.depth
            )));
        }
        Ok(())
    }

    /// Cells per side at `level`.
    pub fn cells(&self, level: u32) -> u32 {
        1 << level
    }

    /// Cell edge length in RoI pixels at `level`.
    pub fn cell_size(&self, level: u32) -> f64 {
        self.roi_size as f64 / self.cells(level) as f64
    }

    /// Number of refinement stages after the base prediction.
    pub fn refinement_stages(&self) -> u32 {
        self.depth - self.base_depth
    }

    /// Worst-case per-axis error of cell-center decoding at full depth.
    pub fn quantization_bound(&self) -> f64 {
        self.cell_size(self.depth) / 2.0
    }
}

/// A cell of the level-`level` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub level: u32,
    pub ix: u32,
    pub iy: u32,
}

impl CellIndex {
    pub fn new(level: u32, ix: u32, iy: u32) -> Result<Self> {
        if level > MAX_DEPTH || ix >= 1 << level || iy >= 1 << level {
            return Err(Error::invalid(format!(
                "cell ({ix}, {iy}) out of range for level {level}"
            )));
        }
        Ok(Self { level, ix, iy })
    }

    pub fn parent(&self) -> Option<CellIndex> {
        (self.level > 0).then(|| CellIndex {
            level: self.level - 1,
            ix: self.ix >> 1,
            iy: self.iy >> 1,
        })
    }

    /// Center in RoI pixels.
    pub fn center(&self, grid: &GridSpec) -> Point2<f64> {
        let s = grid.cell_size(self.level);
        Point2::new((self.ix as f64 + 0.5) * s, (self.iy as f64 + 0.5) * s)
    }

    /// Half-open pixel extent `[min, max)` per axis.
    pub fn bounds(&self, grid: &GridSpec) -> (Point2<f64>, Point2<f64>) {
        let s = grid.cell_size(self.level);
        (
            Point2::new(self.ix as f64 * s, self.iy as f64 * s),
            Point2::new((self.ix + 1) as f64 * s, (self.iy + 1) as f64 * s),
        )
    }

    /// True when `other` is this cell or one of its descendants.
    pub fn contains(&self, other: &CellIndex) -> bool {
        other.level >= self.level
            && other.ix >> (other.level - self.level) == self.ix
            && other.iy >> (other.level - self.level) == self.iy
    }
}

/// Index of an MSB-first bit code: `Σ bits(k)·2^(d−k)`.
pub fn code_to_index(bits: &[bool]) -> u32 {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as u32)
}

/// MSB-first `d`-bit code of `index`.
pub fn index_to_code(index: u32, depth: u32) -> Result<Vec<bool>> {
    if depth == 0 || depth > MAX_DEPTH || index >= 1 << depth {
        return Err(Error::invalid(format!(
            "index {index} does not fit in {depth} bits"
        )));
    }
    Ok((0..depth).rev().map(|k| (index >> k) & 1 == 1).collect())
}

/// Codes of one keypoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointCode {
    pub visible: bool,
    pub x: Vec<bool>,
    pub y: Vec<bool>,
}

impl KeypointCode {
    /// Out-of-RoI placeholder with all-zero index bits.
    pub fn invisible(depth: u32) -> Self {
        Self {
            visible: false,
            x: vec![false; depth as usize],
            y: vec![false; depth as usize],
        }
    }

    pub fn depth(&self) -> u32 {
        self.x.len() as u32
    }

    /// Full-depth cell named by the codes (meaningless when `visible` is false).
    pub fn cell(&self) -> CellIndex {
        CellIndex {
            level: self.depth(),
            ix: code_to_index(&self.x),
            iy: code_to_index(&self.y),
        }
    }
}

/// Codes for a whole keypoint set, all of the same depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeSet {
    pub depth: u32,
    pub codes: Vec<KeypointCode>,
}

impl BinaryCodeSet {
    pub fn new(depth: u32, codes: Vec<KeypointCode>) -> Result<Self> {
        if let Some((i, _)) = codes
            .iter()
            .enumerate()
            .find(|(_, c)| c.x.len() != depth as usize || c.y.len() != depth as usize)
        {
            return Err(Error::invalid(format!("keypoint {i} has codes of the wrong depth")));
        }
        Ok(Self { depth, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Bits per keypoint: one visibility bit plus two `d`-bit indices.
    pub fn bits_per_keypoint(&self) -> usize {
        2 * self.depth as usize + 1
    }
}

/// Encodes a projection given in RoI coordinates.
///
/// Cells are half-open, so a point on an interior boundary belongs to the
/// higher-index cell and `roi_size` itself lies outside the RoI.
pub fn encode_projection(rho: &Point2<f64>, grid: &GridSpec) -> Result<KeypointCode> {
    if !rho.x.is_finite() || !rho.y.is_finite() {
        return Err(Error::invalid(format!("non-finite projection {rho:?}")));
    }
    let size = grid.roi_size as f64;
    if !(0.0..size).contains(&rho.x) || !(0.0..size).contains(&rho.y) {
        return Ok(KeypointCode::invisible(grid.depth));
    }
    let cells = grid.cells(grid.depth);
    let to_index = |c: f64| ((c * cells as f64 / size).floor() as u32).min(cells - 1);
    Ok(KeypointCode {
        visible: true,
        x: index_to_code(to_index(rho.x), grid.depth)?,
        y: index_to_code(to_index(rho.y), grid.depth)?,
    })
}

/// Encodes a batch; `None` entries (e.g. points behind the camera) become invisible codes.
pub fn encode_projections(points: &[Option<Point2<f64>>], grid: &GridSpec) -> Result<BinaryCodeSet> {
    let codes = points
        .iter()
        .map(|p| match p {
            Some(p) => encode_projection(p, grid),
            None => Ok(KeypointCode::invisible(grid.depth)),
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryCodeSet::new(grid.depth, codes)
}

/// Cell centers of visible keypoints; `None` for `b_v = 0`.
pub fn decode_codes(codes: &BinaryCodeSet, grid: &GridSpec) -> Vec<Option<Point2<f64>>> {
    codes
        .codes
        .iter()
        .map(|c| c.visible.then(|| c.cell().center(grid)))
        .collect()
}

/// Decodes only the first `level` bits of every code (coarse localization).
pub fn decode_prefix(
    codes: &BinaryCodeSet,
    level: u32,
    grid: &GridSpec,
) -> Result<Vec<Option<Point2<f64>>>> {
    codes
        .codes
        .iter()
        .map(|c| {
            let cell = prefix_cell(c, level)?;
            Ok(c.visible.then(|| cell.center(grid)))
        })
        .collect()
}

/// The level-`level` cell named by the first `level` bits of each code.
pub fn prefix_cell(code: &KeypointCode, level: u32) -> Result<CellIndex> {
    if level == 0 || level > code.depth() {
        return Err(Error::invalid(format!(
            "prefix level {level} outside 1..={}",
            code.depth()
        )));
    }
    let l = level as usize;
    Ok(CellIndex {
        level,
        ix: code_to_index(&code.x[..l]),
        iy: code_to_index(&code.y[..l]),
    })
}

/// The 2×2 subdivision of `cell`, ordered (x-major within each row):
/// `(2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1)`.
pub fn child_cells(cell: &CellIndex) -> Result<[CellIndex; 4]> {
    if cell.level >= MAX_DEPTH {
        return Err(Error::invalid(format!("cell at level {} cannot be split", cell.level)));
    }
    let level = cell.level + 1;
    let (x, y) = (cell.ix * 2, cell.iy * 2);
    Ok([
        CellIndex { level, ix: x, iy: y },
        CellIndex { level, ix: x + 1, iy: y },
        CellIndex { level, ix: x, iy: y + 1 },
        CellIndex { level, ix: x + 1, iy: y + 1 },
    ])
}

/// Per-keypoint probabilities for `b_v` and every bit of `b_x`, `b_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCodeSet {
    pub depth: u32,
    pub visible: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl SoftCodeSet {
    pub fn new(depth: u32, visible: Vec<f64>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        let n = visible.len();
        if x.len() != n || y.len() != n {
            return Err(Error::invalid("soft code arrays have mismatched lengths"));
        }
        let in_unit = |p: &f64| (0.0..=1.0).contains(p);
        if !visible.iter().all(in_unit)
            || x.iter().chain(y.iter()).any(|row| {
                row.len() != depth as usize || !row.iter().all(in_unit)
            })
        {
            return Err(Error::invalid("soft codes must be probabilities of the stated depth"));
        }
        Ok(Self {
            depth,
            visible,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }
}

/// Thresholds probabilities into bits; a probability equal to `threshold` maps to 1.
pub fn harden(soft: &SoftCodeSet, threshold: f64) -> BinaryCodeSet {
    let bit = |p: &f64| *p >= threshold;
    BinaryCodeSet {
        depth: soft.depth,
        codes: soft
            .visible
            .iter()
            .zip(soft.x.iter().zip(&soft.y))
            .map(|(v, (x, y))| KeypointCode {
                visible: bit(v),
                x: x.iter().map(bit).collect(),
                y: y.iter().map(bit).collect(),
            })
            .collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct CodeRecord {
    b_v: u8,
    b_x: String,
    b_y: String,
}

fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn string_to_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::invalid(format!("invalid bit character {other:?}"))),
        })
        .collect()
}

/// JSON array of `{"b_v": 0|1, "b_x": "101…", "b_y": "010…"}`, MSB first.
pub fn codes_to_json(codes: &BinaryCodeSet) -> String {
    let records: Vec<CodeRecord> = codes
        .codes
        .iter()
        .map(|c| CodeRecord {
            b_v: c.visible as u8,
            b_x: bits_to_string(&c.x),
            b_y: bits_to_string(&c.y),
        })
        .collect();
    serde_json::to_string(&records).expect("code records serialize")
}

pub fn codes_from_json(text: &str) -> Result<BinaryCodeSet> {
    let records: Vec<CodeRecord> =
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("code json: {e}")))?;
    let codes = records
        .iter()
        .map(|r| {
            if r.b_v > 1 {
                return Err(Error::invalid(format!("b_v must be 0 or 1, got {}", r.b_v)));
            }
            Ok(KeypointCode {
                visible: r.b_v == 1,
                x: string_to_bits(&r.b_x)?,
                y: string_to_bits(&r.b_y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let depth = codes.first().map_or(0, |c| c.depth());
    BinaryCodeSet::new(depth, codes)
}

/// Bytes used per keypoint by [`pack_codes`].
pub fn packed_stride(depth: u32) -> usize {
    (2 * depth as usize + 1).div_ceil(8)
}

/// Packs each keypoint as `b_v, b_x[0..d], b_y[0..d]` MSB-first into its own
/// zero-padded run of bytes.
pub fn pack_codes(codes: &BinaryCodeSet) -> Vec<u8> {
    let stride = packed_stride(codes.depth);
    let mut out = vec![0u8; stride * codes.len()];
    for (k, c) in codes.codes.iter().enumerate() {
        let bits = std::iter::once(c.visible).chain(c.x.iter().copied()).chain(c.y.iter().copied());
        for (b, bit) in bits.enumerate() {
            if bit {
                out[k * stride + b / 8] |= 0x80 >> (b % 8);
            }
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], depth: u32) -> Result<BinaryCodeSet> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::invalid(format!("unsupported depth {depth}")));
    }
    let stride = packed_stride(depth);
    if bytes.len() % stride != 0 {
        return Err(Error::invalid(format!(
            "packed length {} is not a multiple of {stride}",
            bytes.len()
        )));
    }
    let d = depth as usize;
    let codes = bytes
        .chunks(stride)
        .map(|chunk| {
            let bit = |b: usize| chunk[b / 8] & (0x80 >> (b % 8)) != 0;
            KeypointCode {
                visible: bit(0),
                x: (1..=d).map(bit).collect(),
                y: (d + 1..=2 * d).map(bit).collect(),
            }
        })
        .collect();
    BinaryCodeSet::new(depth, codes)
}
