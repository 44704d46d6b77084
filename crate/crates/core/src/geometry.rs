//! Axis-aligned boxes in corner and center form.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;

/// Corner-form box `(x1, y1, x2, y2)`, any consistent unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center-form box with normalized `[0, 1]` frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Rect { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn hull(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Intersection over union; 0 when both boxes are empty.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

impl CenterBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        CenterBox { cx, cy, w, h }
    }

    pub fn to_rect(&self) -> Rect {
        Rect::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        CenterBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn l1(&self, other: &CenterBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// Generalized IoU of center-form boxes held in the last axis (size 4) of
/// two broadcast-compatible vars. Returns the broadcast shape without the
/// last axis.
pub fn giou_var<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let area_a = ax2.sub(ax1).mul(ay2.sub(ay1));
    let area_b = bx2.sub(bx1).mul(by2.sub(by1));
    let iw = ax2.minimum(bx2).sub(ax1.maximum(bx1)).relu();
    let ih = ay2.minimum(by2).sub(ay1.maximum(by1)).relu();
    let inter = iw.mul(ih);
    let union = area_a.add(area_b).sub(inter);
    let hull_w = ax2.maximum(bx2).sub(ax1.minimum(bx1));
    let hull_h = ay2.maximum(by2).sub(ay1.minimum(by1));
    let hull = hull_w.mul(hull_h);
    let iou = inter.div(union);
    iou.sub(hull.sub(union).div(hull))
}

fn corners<'g>(b: Var<'g>) -> (Var<'g>, Var<'g>, Var<'g>, Var<'g>) {
    let nd = b.shape().len();
    let last = nd - 1;
    let mut squeeze = b.shape();
    squeeze.pop();
    let cx = b.narrow(last, 0, 1).reshape(squeeze.clone());
    let cy = b.narrow(last, 1, 1).reshape(squeeze.clone());
    let hw = b.narrow(last, 2, 1).reshape(squeeze.clone()).scale(0.5);
    let hh = b.narrow(last, 3, 1).reshape(squeeze).scale(0.5);
    (cx.sub(hw), cy.sub(hh), cx.add(hw), cy.add(hh))
}
