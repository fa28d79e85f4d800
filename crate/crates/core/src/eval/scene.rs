//! Procedural 16×16 scenes: one bright shape on a dark background.

use crate::error::{invalid, Result};
use crate::tensor::{Grid, SeededRng};

pub const SIDE: usize = 16;
pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.9;
pub const PIXEL_NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Left,
    Right,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];
pub const SLOTS: [Slot; 2] = [Slot::Left, Slot::Right];
pub const NUM_CLASSES: usize = 6;

const DX: [i32; 3] = [-2, 0, 2];
const DY: [i32; 5] = [-4, -2, 0, 2, 4];
pub const NUM_LAYOUTS: usize = DX.len() * DY.len();

/// Shape and slot; the condition id is `shape_index · 2 + slot_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneClass {
    pub shape: Shape,
    pub slot: Slot,
}

impl SceneClass {
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= NUM_CLASSES {
            return Err(invalid(format!("class id {id} out of range")));
        }
        Ok(Self {
            shape: SHAPES[id / 2],
            slot: SLOTS[id % 2],
        })
    }

    pub fn id(&self) -> usize {
        let s = SHAPES.iter().position(|&x| x == self.shape).unwrap();
        let p = SLOTS.iter().position(|&x| x == self.slot).unwrap();
        s * 2 + p
    }

    /// The benchmark edit: next shape in the cycle square → circle → cross, same slot.
    pub fn edit_target(&self) -> Self {
        let s = SHAPES.iter().position(|&x| x == self.shape).unwrap();
        Self {
            shape: SHAPES[(s + 1) % 3],
            slot: self.slot,
        }
    }
}

/// 5×5 stencil of each shape.
fn stencil(shape: Shape, dy: i32, dx: i32) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match shape {
        Shape::Square => ay == 2 || ax == 2,
        Shape::Circle => !(ay == 2 && ax == 2),
        Shape::Cross => dy == 0 || dx == 0,
    }
}

fn centre(slot: Slot, layout: usize) -> (i32, i32) {
    let base_x = match slot {
        Slot::Left => 4,
        Slot::Right => 11,
    };
    (7 + DY[layout / DX.len()], base_x + DX[layout % DX.len()])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(invalid("mask size does not match its shape"));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Zeroes everything outside the mask.
    pub fn crop(&self, image: &Grid) -> Grid {
        let mut out = image.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&self.cells) {
            if !m {
                *v = 0.0;
            }
        }
        out
    }
}

/// The noiseless image of a class at one of the layouts, and its bounding-box mask.
pub fn render(class: SceneClass, layout: usize) -> Result<(Grid, Mask)> {
    if layout >= NUM_LAYOUTS {
        return Err(invalid(format!("layout {layout} out of range")));
    }
    let (cy, cx) = centre(class.slot, layout);
    let mut img = Grid::filled(SIDE, SIDE, BACKGROUND);
    let mut cells = vec![false; SIDE * SIDE];
    for dy in -2..=2 {
        for dx in -2..=2 {
            let (y, x) = ((cy + dy) as usize, (cx + dx) as usize);
            cells[y * SIDE + x] = true;
            if stencil(class.shape, dy, dx) {
                img.set(y, x, FOREGROUND);
            }
        }
    }
    Ok((
        img,
        Mask {
            height: SIDE,
            width: SIDE,
            cells,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Grid,
    pub class: SceneClass,
    pub layout: usize,
    pub mask: Mask,
}

impl Scene {
    pub fn cond_id(&self) -> usize {
        self.class.id()
    }
}

/// `n` scenes with classes cycling through all ids (balanced within one) and random layouts.
pub fn gen_dataset(seed: u64, n: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let class = SceneClass::from_id(i % NUM_CLASSES)?;
            let layout = rng.below(NUM_LAYOUTS);
            let (mut image, mask) = render(class, layout)?;
            for v in image.data_mut() {
                *v = (*v + PIXEL_NOISE * rng.standard_normal()).clamp(0.0, 1.0);
            }
            Ok(Scene {
                image,
                class,
                layout,
                mask,
            })
        })
        .collect()
}

/// Background maps to −1 and foreground to +1.
pub fn to_latent(image: &Grid) -> Grid {
    let (mid, half) = (
        0.5 * (FOREGROUND + BACKGROUND),
        0.5 * (FOREGROUND - BACKGROUND),
    );
    image.map(|v| (v - mid) / half)
}

/// Inverse of [`to_latent`], saturating at the scene's intensity range.
pub fn from_latent(z: &Grid) -> Grid {
    let (mid, half) = (
        0.5 * (FOREGROUND + BACKGROUND),
        0.5 * (FOREGROUND - BACKGROUND),
    );
    z.map(|v| (mid + half * v).clamp(BACKGROUND, FOREGROUND))
}
