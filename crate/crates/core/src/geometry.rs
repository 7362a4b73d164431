use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    /// Box with coordinates reordered so that min <= max on both axes.
    pub fn normalized(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
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

    /// True when the box has strictly positive extent on both axes.
    pub fn is_proper(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        BBox::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Clip to `[0, width] x [0, height]`. The result may be improper if the
    /// box lay entirely outside the frame.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }

    /// Mirror horizontally inside a frame of the given width.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox::new(width - self.x_max, self.y_min, width - self.x_min, self.y_max)
    }
}
