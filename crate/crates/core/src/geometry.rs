//! Bounding-box algebra: IoU, the nine box-transform actions and clamping.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Continuous axis-aligned box in image pixel coordinates.
///
/// Stored and serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// The box covering a whole `width`×`height` image.
    pub fn full(width: usize, height: usize) -> Self {
        BBox::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    /// Intersection with the image rectangle; may be empty (invalid).
    pub fn clamp_to(&self, width: usize, height: usize) -> BBox {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width as f64),
            self.y_max.min(height as f64),
        )
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }

    /// Integer pixel bounds `(x0, y0, x1, y1)` (half-open) after rounding the
    /// box outward and clamping to the image. `None` when the result is empty.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if !(self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite())
        {
            return None;
        }
        let x0 = self.x_min.floor().max(0.0);
        let y0 = self.y_min.floor().max(0.0);
        let x1 = self.x_max.ceil().min(width as f64);
        let y1 = self.y_max.ceil().min(height as f64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Best IoU of `b` against `gts` and the index attaining it (lowest index on ties).
pub fn best_match(b: &BBox, gts: &[BBox]) -> Result<(f64, usize)> {
    if gts.is_empty() {
        return Err(Error::Contract(
            "best_match needs at least one ground-truth box".into(),
        ));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// The agent's action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Up,
    Down,
    Right,
    Left,
    Bigger,
    Smaller,
    Thicker,
    Thinner,
    Trigger,
}

pub const NUM_ACTIONS: usize = 9;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Right,
        Action::Left,
        Action::Bigger,
        Action::Smaller,
        Action::Thicker,
        Action::Thinner,
        Action::Trigger,
    ];

    /// Every action except [`Action::Trigger`].
    pub const MOVES: [Action; NUM_ACTIONS - 1] = [
        Action::Up,
        Action::Down,
        Action::Right,
        Action::Left,
        Action::Bigger,
        Action::Smaller,
        Action::Thicker,
        Action::Thinner,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn is_terminal(self) -> bool {
        self == Action::Trigger
    }

    pub fn label(self) -> &'static str {
        match self {
            Action::Up => "UP",
            Action::Down => "DOWN",
            Action::Right => "RIGHT",
            Action::Left => "LEFT",
            Action::Bigger => "BIGGER",
            Action::Smaller => "SMALLER",
            Action::Thicker => "THICKER",
            Action::Thinner => "THINNER",
            Action::Trigger => "TRIGGER",
        }
    }
}

/// Step magnitudes for the box transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// Step size relative to the current box side.
    pub alpha: f64,
    /// Smallest allowed box side in pixels.
    pub min_side: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            alpha: 0.2,
            min_side: 16.0,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "transform alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.min_side >= 1.0) {
            return Err(Error::Config(format!(
                "min_side must be >= 1, got {}",
                self.min_side
            )));
        }
        Ok(())
    }
}

/// Applies a non-terminal action to `b` inside a `img_w`×`img_h` image.
///
/// Every edge is clamped to the image independently, so a translation against
/// the border trims the leading edge while the opposite edge still moves. A
/// side that ends up shorter than `min_side` is re-grown about its center and
/// shifted back inside.
pub fn apply_action(
    b: &BBox,
    action: Action,
    cfg: &TransformConfig,
    img_w: usize,
    img_h: usize,
) -> Result<BBox> {
    if action == Action::Trigger {
        return Err(Error::Contract(
            "TRIGGER does not transform the box".into(),
        ));
    }
    let (iw, ih) = (img_w as f64, img_h as f64);
    let dx = cfg.alpha * b.width();
    let dy = cfg.alpha * b.height();
    let (mut x0, mut y0, mut x1, mut y1) = (b.x_min, b.y_min, b.x_max, b.y_max);
    match action {
        Action::Up => {
            y0 -= dy;
            y1 -= dy;
        }
        Action::Down => {
            y0 += dy;
            y1 += dy;
        }
        Action::Left => {
            x0 -= dx;
            x1 -= dx;
        }
        Action::Right => {
            x0 += dx;
            x1 += dx;
        }
        Action::Bigger => {
            x0 -= 0.5 * dx;
            x1 += 0.5 * dx;
            y0 -= 0.5 * dy;
            y1 += 0.5 * dy;
        }
        Action::Smaller => {
            x0 += 0.5 * dx;
            x1 -= 0.5 * dx;
            y0 += 0.5 * dy;
            y1 -= 0.5 * dy;
        }
        Action::Thicker => {
            x0 -= 0.5 * dx;
            x1 += 0.5 * dx;
            y0 += 0.5 * dy;
            y1 -= 0.5 * dy;
        }
        Action::Thinner => {
            x0 += 0.5 * dx;
            x1 -= 0.5 * dx;
            y0 -= 0.5 * dy;
            y1 += 0.5 * dy;
        }
        Action::Trigger => unreachable!(),
    }
    let (x0, x1) = fit_side(x0.max(0.0), x1.min(iw), cfg.min_side, iw);
    let (y0, y1) = fit_side(y0.max(0.0), y1.min(ih), cfg.min_side, ih);
    Ok(BBox::new(x0, y0, x1, y1))
}

/// One move of the greedy-IoU oracle: the non-terminal action whose result
/// overlaps `target` most.
///
/// Ties prefer the result whose center lies closest to the target's center,
/// then the lowest action index. Returns the action, the new box and its IoU.
pub fn greedy_oracle_step(
    b: &BBox,
    target: &BBox,
    cfg: &TransformConfig,
    img_w: usize,
    img_h: usize,
) -> Result<(Action, BBox, f64)> {
    let (tx, ty) = target.center();
    let mut best: Option<(Action, BBox, f64, f64)> = None;
    for a in Action::MOVES {
        let nb = apply_action(b, a, cfg, img_w, img_h)?;
        let v = iou(&nb, target);
        let (cx, cy) = nb.center();
        let d = (cx - tx).hypot(cy - ty);
        let better = match &best {
            None => true,
            Some((_, _, bv, bd)) => v > *bv || (v == *bv && d < *bd),
        };
        if better {
            best = Some((a, nb, v, d));
        }
    }
    let (a, nb, v, _) = best.expect("at least one move");
    Ok((a, nb, v))
}

/// Enforces the minimum side on one axis, keeping the interval inside `[0, limit]`.
fn fit_side(lo: f64, hi: f64, min_side: f64, limit: f64) -> (f64, f64) {
    let side = min_side.min(limit);
    if hi - lo >= side {
        return (lo, hi);
    }
    let c = 0.5 * (lo + hi);
    let (mut lo, mut hi) = (c - 0.5 * side, c + 0.5 * side);
    if lo < 0.0 {
        hi -= lo;
        lo = 0.0;
    }
    if hi > limit {
        lo -= hi - limit;
        hi = limit;
    }
    (lo.max(0.0), hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts integer pixels covered by both / either box (integer corners only).
    fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        let xmax = a.x_max.max(b.x_max) as i64;
        let ymax = a.y_max.max(b.y_max) as i64;
        for y in 0..ymax {
            for x in 0..xmax {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x_min && px < a.x_max && py > a.y_min && py < a.y_max;
                let inb = px > b.x_min && px < b.x_max && py > b.y_min && py < b.y_max;
                inter += (ina && inb) as usize;
                union += (ina || inb) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(3.0, 4.0, 20.0, 11.0);
        assert_eq!(iou(&b, &b), 1.0);
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let c = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_half_overlap_is_one_third() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        let oracle = pixel_iou(&a, &b);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn down_translates_by_alpha_height() {
        let b = BBox::new(0.0, 0.0, 100.0, 100.0);
        let out = apply_action(&b, Action::Down, &TransformConfig::default(), 500, 500).unwrap();
        assert_eq!(out, BBox::new(0.0, 20.0, 100.0, 120.0));
    }

    #[test]
    fn smaller_on_min_side_box_is_noop() {
        let cfg = TransformConfig::default();
        let b = BBox::new(40.0, 50.0, 56.0, 66.0);
        let out = apply_action(&b, Action::Smaller, &cfg, 128, 128).unwrap();
        assert!((out.x_min - b.x_min).abs() < 1e-12 && (out.x_max - b.x_max).abs() < 1e-12);
        assert!((out.y_min - b.y_min).abs() < 1e-12 && (out.y_max - b.y_max).abs() < 1e-12);
    }

    #[test]
    fn right_on_flush_box_keeps_right_edge() {
        let b = BBox::new(60.0, 10.0, 100.0, 50.0);
        let out = apply_action(&b, Action::Right, &TransformConfig::default(), 100, 100).unwrap();
        assert_eq!(out, BBox::new(68.0, 10.0, 100.0, 50.0));
        assert_eq!(out.x_max, 100.0);
        // a flush box already at min_side cannot move further
        let m = BBox::new(84.0, 10.0, 100.0, 26.0);
        assert_eq!(apply_action(&m, Action::Right, &TransformConfig::default(), 100, 100).unwrap(), m);
    }

    #[test]
    fn greedy_oracle_picks_the_best_move() {
        let cfg = TransformConfig::default();
        let gt = BBox::new(9.0, 109.0, 27.0, 125.0);
        let mut b = BBox::full(128, 128);
        for _ in 0..40 {
            let (a, nb, v) = greedy_oracle_step(&b, &gt, &cfg, 128, 128).unwrap();
            for m in Action::MOVES {
                assert!(iou(&apply_action(&b, m, &cfg, 128, 128).unwrap(), &gt) <= v);
            }
            assert_eq!(apply_action(&b, a, &cfg, 128, 128).unwrap(), nb);
            b = nb;
        }
        assert!(iou(&b, &gt) >= 0.5);
    }

    #[test]
    fn trigger_is_rejected() {
        let b = BBox::full(10, 10);
        assert!(matches!(
            apply_action(&b, Action::Trigger, &TransformConfig::default(), 10, 10),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn thicker_is_wider_and_shorter() {
        let b = BBox::new(100.0, 100.0, 200.0, 200.0);
        let cfg = TransformConfig::default();
        let t = apply_action(&b, Action::Thicker, &cfg, 500, 500).unwrap();
        assert!(t.width() > b.width() && t.height() < b.height());
        let n = apply_action(&b, Action::Thinner, &cfg, 500, 500).unwrap();
        assert!(n.width() < b.width() && n.height() > b.height());
        assert_eq!(t.center(), b.center());
    }

    #[test]
    fn best_match_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(best_match(&b, &[b]).unwrap(), (1.0, 0));
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(best_match(&b, &[far, b]).unwrap(), (1.0, 1));
        assert!(best_match(&b, &[]).is_err());

        // IoU 1/3 and 1/5, computed by pixel counting
        let g1 = BBox::new(5.0, 0.0, 15.0, 10.0);
        let g2 = BBox::new(0.0, 0.0, 10.0, 2.0);
        assert!((pixel_iou(&b, &g2) - 0.2).abs() < 1e-12);
        let (v, i) = best_match(&b, &[g1, g2]).unwrap();
        assert_eq!(i, 0);
        assert!((v - pixel_iou(&b, &g1)).abs() < 1e-12);
    }

    #[test]
    fn equal_ious_pick_lowest_index() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let l = BBox::new(-5.0, 0.0, 5.0, 10.0);
        let r = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert_eq!(best_match(&b, &[l, r]).unwrap().1, 0);
        assert_eq!(best_match(&b, &[r, l]).unwrap().1, 0);
    }

    #[test]
    fn pixel_bounds_round_outward() {
        let b = BBox::new(1.2, 2.7, 5.1, 6.0);
        assert_eq!(b.pixel_bounds(10, 10), Some((1, 2, 6, 6)));
        assert_eq!(BBox::new(12.0, 0.0, 15.0, 3.0).pixel_bounds(10, 10), None);
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
    }

    fn arb_box(limit: f64) -> impl Strategy<Value = BBox> {
        (0.0..limit - 1.0, 0.0..limit - 1.0, 1.0..limit, 1.0..limit).prop_map(
            move |(x, y, w, h)| BBox::new(x, y, (x + w).min(limit), (y + h).min(limit)),
        )
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(200.0), b in arb_box(200.0)) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn iou_one_iff_equal(a in arb_box(200.0), b in arb_box(200.0)) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-9);
            if a != b {
                let v = iou(&a, &b);
                let same = (a.x_min - b.x_min).abs() < 1e-9
                    && (a.x_max - b.x_max).abs() < 1e-9
                    && (a.y_min - b.y_min).abs() < 1e-9
                    && (a.y_max - b.y_max).abs() < 1e-9;
                prop_assert!(same || v < 1.0 - 1e-9);
            }
        }

        #[test]
        fn up_then_down_quasi_inverts(
            x in 100.0..200.0f64, y in 100.0..200.0f64, w in 20.0..80.0f64, h in 20.0..80.0f64
        ) {
            let cfg = TransformConfig::default();
            let b = BBox::new(x, y, x + w, y + h);
            let up = apply_action(&b, Action::Up, &cfg, 400, 400).unwrap();
            let back = apply_action(&up, Action::Down, &cfg, 400, 400).unwrap();
            let tol = cfg.alpha * cfg.alpha * h + 1e-9;
            prop_assert!((back.y_min - b.y_min).abs() <= tol);
            prop_assert!((back.y_max - b.y_max).abs() <= tol);
        }

        #[test]
        fn actions_respect_bounds_and_min_side(
            b in arb_box(128.0), a in 0usize..8, w in 16usize..160, h in 16usize..160
        ) {
            let cfg = TransformConfig::default();
            let b = b.clamp_to(w, h);
            prop_assume!(b.is_valid());
            let out = apply_action(&b, Action::MOVES[a], &cfg, w, h).unwrap();
            prop_assert!(out.within(w, h));
            prop_assert!(out.width() >= cfg.min_side - 1e-9);
            prop_assert!(out.height() >= cfg.min_side - 1e-9);
        }
    }
}
