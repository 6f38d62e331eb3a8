/// A point in normalized field coordinates `[x, y]`.
pub type Pos = [f64; 2];

/// Closed axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, p: Pos) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn inside_unit(&self) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= 1.0 && self.y1 <= 1.0 && self.x0 <= self.x1 && self.y0 <= self.y1
    }

    /// Maps `p` into rectangle-local normalized coordinates.
    pub fn to_local(&self, p: Pos) -> Pos {
        [(p[0] - self.x0) / self.width(), (p[1] - self.y0) / self.height()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Rect { x0: a[0], y0: a[1], x1: a[2], y1: a[3] }
    }
}

pub(crate) fn dist(a: Pos, b: Pos) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}
