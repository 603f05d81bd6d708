//! Synthetic fixture floors drawn at 0.1 m per pixel.
//!
//! * `room`: a single rectangular room, 8.4 m × 8.4 m inside the walls
//! * `plus`: two crossing corridors of different widths
//! * `floor3-like`: a corridor with rooms on both sides and a side wing

use crate::gridmap::{MapMeta, OccupancyGrid};

pub const FIXTURE_RESOLUTION_M: f64 = 0.1;
pub const FIXTURE_NAMES: [&str; 3] = ["room", "plus", "floor3-like"];

const WALL: u8 = 0;
const FREE: u8 = 255;

struct Canvas {
    w: usize,
    h: usize,
    cells: Vec<u8>,
}

impl Canvas {
    fn new(width_m: f64, height_m: f64) -> Self {
        let w = (width_m / FIXTURE_RESOLUTION_M).round() as usize;
        let h = (height_m / FIXTURE_RESOLUTION_M).round() as usize;
        Self {
            w,
            h,
            cells: vec![WALL; w * h],
        }
    }

    /// Fill `[x0, x1) × [y0, y1)` (meters) with `gray`.
    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, gray: u8) {
        let px = |v: f64| (v / FIXTURE_RESOLUTION_M).round() as usize;
        for y in px(y0)..px(y1).min(self.h) {
            for x in px(x0)..px(x1).min(self.w) {
                self.cells[y * self.w + x] = gray;
            }
        }
    }

    fn carve(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.fill(x0, y0, x1, y1, FREE);
    }

    fn finish(self) -> OccupancyGrid {
        let meta = MapMeta {
            resolution_m: FIXTURE_RESOLUTION_M,
            origin_x_m: 0.0,
            origin_y_m: 0.0,
        };
        OccupancyGrid::new(self.w, self.h, meta, self.cells).expect("fixture dimensions")
    }
}

pub fn room() -> OccupancyGrid {
    let mut c = Canvas::new(9.0, 9.0);
    c.carve(0.3, 0.3, 8.7, 8.7);
    c.finish()
}

pub fn plus() -> OccupancyGrid {
    let mut c = Canvas::new(20.0, 20.0);
    c.carve(0.5, 8.8, 19.5, 11.2);
    c.carve(9.2, 0.5, 10.8, 19.5);
    c.finish()
}

pub fn floor3_like() -> OccupancyGrid {
    let mut c = Canvas::new(36.0, 17.0);
    // main corridor
    c.carve(0.5, 7.3, 35.5, 9.7);
    // north rooms
    c.carve(0.5, 0.5, 8.2, 7.0);
    c.carve(8.5, 0.5, 14.2, 7.0);
    c.carve(14.5, 0.5, 22.2, 7.0);
    c.carve(22.5, 0.5, 28.2, 7.0);
    // north-east wing: narrow side corridor and a small office
    c.carve(28.5, 0.5, 30.3, 7.0);
    c.carve(30.6, 0.5, 35.5, 7.0);
    // south rooms
    c.carve(0.5, 10.0, 11.2, 16.5);
    c.carve(11.5, 10.0, 18.2, 16.5);
    c.carve(18.5, 10.0, 35.5, 16.5);
    // doors into the corridor (1.2 m)
    for x in [3.0, 10.5, 17.5, 24.5, 32.0] {
        c.carve(x, 7.0, x + 1.2, 7.3);
    }
    for x in [4.5, 14.0, 25.0] {
        c.carve(x, 9.7, x + 1.2, 10.0);
    }
    // the side corridor is open to the main corridor over its full width
    c.carve(28.5, 7.0, 30.3, 7.3);
    // a column in the big south room
    c.fill(26.5, 12.5, 27.1, 13.1, WALL);
    c.finish()
}

pub fn by_name(name: &str) -> Option<OccupancyGrid> {
    match name {
        "room" => Some(room()),
        "plus" => Some(plus()),
        "floor3-like" | "floor3_like" => Some(floor3_like()),
        _ => None,
    }
}
