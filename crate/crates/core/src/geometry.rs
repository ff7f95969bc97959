//! Masks, boxes and overlap measures.
//!
//! Boxes use the half-open pixel convention `[x1, x2) x [y1, y2)`, so a box
//! covering exactly one pixel is `[x, y, x + 1, y + 1]` and areas are plain
//! integer products.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("frame size must be at least 1x1, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]")]
    DegenerateBox { x1: u32, y1: u32, x2: u32, y2: u32 },
    #[error("mask size mismatch: {left} vs {right}")]
    SizeMismatch { left: FrameSize, right: FrameSize },
    #[error("bitmap has {got} pixels, expected {expected}")]
    BitCount { got: usize, expected: usize },
    #[error("mask sequence is empty")]
    EmptySequence,
    #[error("negative run length {run} at position {index}")]
    NegativeRun { index: usize, run: i64 },
    #[error("zero-length run at interior position {index}")]
    NonCanonicalRun { index: usize },
    #[error("runs sum to {sum}, expected {expected}")]
    RunSumMismatch { sum: u64, expected: u64 },
}

/// Frame dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    width: u32,
    height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyFrame { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// The box covering the whole frame.
    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
        }
    }
}

impl std::fmt::Display for FrameSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned box, half-open on the right and bottom edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self, GeometryError> {
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    /// Pixel area `(x2 - x1) * (y2 - y1)`.
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 as f64 + self.x2 as f64) / 2.0,
            (self.y1 as f64 + self.y2 as f64) / 2.0,
        )
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w as u64 * h as u64
    }

    /// Intersection over union; symmetric and exactly 1 for identical boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Clip to the frame; `None` if nothing of the box remains inside.
    pub fn clip_to(&self, size: FrameSize) -> Option<BBox> {
        let x2 = self.x2.min(size.width);
        let y2 = self.y2.min(size.height);
        BBox::new(self.x1, self.y1, x2, y2).ok()
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[u32; 4]>::deserialize(deserializer)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Convenience for [`BBox::iou`].
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Row-major foreground bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    size: FrameSize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(size: FrameSize) -> Self {
        Self {
            size,
            bits: vec![false; size.pixel_count()],
        }
    }

    pub fn full(size: FrameSize) -> Self {
        Self {
            size,
            bits: vec![true; size.pixel_count()],
        }
    }

    pub fn from_bits(size: FrameSize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != size.pixel_count() {
            return Err(GeometryError::BitCount {
                got: bits.len(),
                expected: size.pixel_count(),
            });
        }
        Ok(Self { size, bits })
    }

    /// Mask with exactly the pixels of `bbox` set (clipped to the frame).
    pub fn from_box(size: FrameSize, bbox: &BBox) -> Self {
        let mut mask = Self::empty(size);
        if let Some(b) = bbox.clip_to(size) {
            for y in b.y1..b.y2 {
                for x in b.x1..b.x2 {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    pub fn size(&self) -> FrameSize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.size.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_size(&self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.size != other.size {
            return Err(GeometryError::SizeMismatch {
                left: self.size,
                right: other.size,
            });
        }
        Ok(())
    }

    /// Intersection over union; 1.0 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, GeometryError> {
        self.check_size(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Tight half-open box around the foreground; `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BBox> {
        let w = self.size.width as usize;
        let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            any = true;
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        any.then_some(BBox { x1, y1, x2, y2 })
    }

    /// Run-length encode, starting with a (possibly empty) background run.
    pub fn to_rle(&self) -> RleRecord {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len: i64 = 0;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                len = 0;
                current = b;
            }
            len += 1;
        }
        runs.push(len);
        RleRecord {
            w: self.size.width,
            h: self.size.height,
            runs,
        }
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    a.iou(b)
}

pub fn mask_to_bbox(mask: &BinaryMask) -> Option<BBox> {
    mask.bounding_box()
}

pub fn bbox_area(b: &BBox) -> u64 {
    b.area()
}

/// Serialized run-length form: `{"w":W,"h":H,"runs":[...]}`.
///
/// Runs are row-major and alternate background/foreground beginning with
/// background. Only the leading run may be zero, which makes the encoding
/// canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleRecord {
    pub w: u32,
    pub h: u32,
    pub runs: Vec<i64>,
}

impl RleRecord {
    pub fn decode(&self) -> Result<BinaryMask, GeometryError> {
        let size = FrameSize::new(self.w, self.h)?;
        let expected = size.pixel_count() as u64;
        let mut sum = 0u64;
        for (index, &run) in self.runs.iter().enumerate() {
            if run < 0 {
                return Err(GeometryError::NegativeRun { index, run });
            }
            if run == 0 && index > 0 {
                return Err(GeometryError::NonCanonicalRun { index });
            }
            sum = sum.saturating_add(run as u64);
        }
        if sum != expected {
            return Err(GeometryError::RunSumMismatch { sum, expected });
        }
        let mut bits = Vec::with_capacity(expected as usize);
        for (index, &run) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(index % 2 == 1, run as usize));
        }
        BinaryMask::from_bits(size, bits)
    }

    pub fn size(&self) -> Result<FrameSize, GeometryError> {
        FrameSize::new(self.w, self.h)
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleRecord {
    mask.to_rle()
}

pub fn rle_decode(record: &RleRecord) -> Result<BinaryMask, GeometryError> {
    record.decode()
}

/// Ordered masks sharing one frame size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    frames: Vec<BinaryMask>,
}

impl MaskSequence {
    pub fn new(frames: Vec<BinaryMask>) -> Result<Self, GeometryError> {
        let first = frames.first().ok_or(GeometryError::EmptySequence)?;
        let size = first.size();
        if let Some(bad) = frames.iter().find(|m| m.size() != size) {
            return Err(GeometryError::SizeMismatch {
                left: size,
                right: bad.size(),
            });
        }
        Ok(Self { frames })
    }

    pub fn empty(size: FrameSize, len: usize) -> Result<Self, GeometryError> {
        Self::new(vec![BinaryMask::empty(size); len])
    }

    pub fn frames(&self) -> &[BinaryMask] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<BinaryMask> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> FrameSize {
        self.frames[0].size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sz(w: u32, h: u32) -> FrameSize {
        FrameSize::new(w, h).unwrap()
    }

    // Pixel-count oracle for box IoU: rasterize both boxes and count.
    fn raster_iou(a: &BBox, c: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        let w = a.x2().max(c.x2());
        let h = a.y2().max(c.y2());
        for y in 0..h {
            for x in 0..w {
                let (pa, pc) = (a.contains_pixel(x, y), c.contains_pixel(x, y));
                inter += (pa && pc) as u64;
                union += (pa || pc) as u64;
            }
        }
        inter as f64 / union as f64
    }

    fn brute_mask_iou(a: &BinaryMask, c: &BinaryMask) -> f64 {
        let mut inter = 0;
        let mut union = 0;
        for y in 0..a.size().height() {
            for x in 0..a.size().width() {
                if a.get(x, y) && c.get(x, y) {
                    inter += 1;
                }
                if a.get(x, y) || c.get(x, y) {
                    union += 1;
                }
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, size: FrameSize, density: f64) -> BinaryMask {
        let bits = (0..size.pixel_count())
            .map(|_| rng.random_bool(density))
            .collect();
        BinaryMask::from_bits(size, bits).unwrap()
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 5, 3, 4).is_err());
        assert!(FrameSize::new(0, 4).is_err());
    }

    #[test]
    fn bbox_iou_examples() {
        assert_eq!(bbox_iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert_eq!(bbox_iou(&b(0, 0, 10, 10), &b(20, 20, 30, 30)), 0.0);
        let oracle = raster_iou(&b(0, 0, 10, 10), &b(5, 0, 15, 10));
        assert_eq!(oracle, 50.0 / 150.0);
        assert!((bbox_iou(&b(0, 0, 10, 10), &b(5, 0, 15, 10)) - oracle).abs() < 1e-15);
    }

    #[test]
    fn bbox_area_examples() {
        assert_eq!(bbox_area(&b(0, 0, 10, 10)), 100);
        assert_eq!(bbox_area(&b(2, 3, 6, 8)), 20);
        assert_eq!(bbox_area(&b(0, 0, 1, 1)), 1);
    }

    #[test]
    fn mask_iou_examples() {
        let size = sz(100, 100);
        let a = BinaryMask::from_box(size, &b(10, 10, 20, 20));
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let e = BinaryMask::empty(size);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        let shifted = BinaryMask::from_box(size, &b(12, 10, 22, 20));
        let oracle = brute_mask_iou(&a, &shifted);
        assert_eq!(oracle, 80.0 / 120.0);
        assert_eq!(mask_iou(&a, &shifted).unwrap(), oracle);
        assert!(mask_iou(&a, &BinaryMask::empty(sz(10, 10))).is_err());
    }

    #[test]
    fn mask_to_bbox_examples() {
        let mut m = BinaryMask::empty(sz(10, 10));
        assert_eq!(mask_to_bbox(&m), None);
        m.set(2, 3, true);
        m.set(5, 7, true);
        assert_eq!(mask_to_bbox(&m), Some(b(2, 3, 6, 8)));
        assert_eq!(
            mask_to_bbox(&BinaryMask::full(sz(4, 4))),
            Some(b(0, 0, 4, 4))
        );
    }

    #[test]
    fn rle_examples() {
        let size = sz(2, 2);
        assert_eq!(BinaryMask::empty(size).to_rle().runs, vec![4]);
        assert_eq!(BinaryMask::full(size).to_rle().runs, vec![0, 4]);
        let json = serde_json::to_string(&BinaryMask::full(size).to_rle()).unwrap();
        assert_eq!(json, r#"{"w":2,"h":2,"runs":[0,4]}"#);
    }

    #[test]
    fn rle_decode_rejects_bad_runs() {
        let bad_sum = RleRecord {
            w: 2,
            h: 2,
            runs: vec![1, 2],
        };
        assert!(matches!(
            bad_sum.decode(),
            Err(GeometryError::RunSumMismatch { .. })
        ));
        let negative = RleRecord {
            w: 2,
            h: 2,
            runs: vec![5, -1],
        };
        assert!(matches!(
            negative.decode(),
            Err(GeometryError::NegativeRun { .. })
        ));
        let interior_zero = RleRecord {
            w: 2,
            h: 2,
            runs: vec![2, 0, 2],
        };
        assert!(matches!(
            interior_zero.decode(),
            Err(GeometryError::NonCanonicalRun { .. })
        ));
    }

    #[test]
    fn rle_round_trip_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let size = sz(rng.random_range(1..24), rng.random_range(1..24));
            let density = rng.random_range(0.0..1.0);
            let m = random_mask(&mut rng, size, density);
            let rle = m.to_rle();
            assert!(rle.runs.iter().skip(1).all(|&r| r > 0));
            assert_eq!(rle.decode().unwrap(), m);
        }
    }

    #[test]
    fn mask_iou_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let size = sz(rng.random_range(1..=16), rng.random_range(1..=16));
            let a = {
                let d = rng.random_range(0.0..0.6);
                random_mask(&mut rng, size, d)
            };
            let c = {
                let d = rng.random_range(0.0..0.6);
                random_mask(&mut rng, size, d)
            };
            assert_eq!(a.iou(&c).unwrap(), brute_mask_iou(&a, &c));
        }
    }

    #[test]
    fn sequence_requires_uniform_size() {
        assert!(MaskSequence::new(vec![]).is_err());
        let seq = vec![BinaryMask::empty(sz(2, 2)), BinaryMask::empty(sz(3, 2))];
        assert!(MaskSequence::new(seq).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..50, 0u32..50, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn bbox_iou_is_symmetric_and_reflexive(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(a.iou(&a), 1.0);
            prop_assert_eq!(a.iou(&c), c.iou(&a));
            prop_assert!((0.0..=1.0).contains(&a.iou(&c)));
            prop_assert!((a.iou(&c) - raster_iou(&a, &c)).abs() < 1e-12);
        }

        #[test]
        fn bounding_box_is_tight(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let size = sz(rng.random_range(1..12), rng.random_range(1..12));
            let m = random_mask(&mut rng, size, 0.15);
            match m.bounding_box() {
                None => prop_assert!(m.is_empty()),
                Some(bb) => {
                    for y in 0..size.height() {
                        for x in 0..size.width() {
                            if m.get(x, y) {
                                prop_assert!(bb.contains_pixel(x, y));
                            }
                        }
                    }
                    // every edge row/column of the box touches the foreground
                    let col_hit = |x: u32| (bb.y1()..bb.y2()).any(|y| m.get(x, y));
                    let row_hit = |y: u32| (bb.x1()..bb.x2()).any(|x| m.get(x, y));
                    prop_assert!(col_hit(bb.x1()) && col_hit(bb.x2() - 1));
                    prop_assert!(row_hit(bb.y1()) && row_hit(bb.y2() - 1));
                }
            }
        }
    }
}
