//! Colored shapes on a 3×3 lattice with relational color questions.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::vision::ImageGrid;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

/// Palette color; components are exact 8-bit levels so images survive
/// 8-bit serialization unchanged.
pub fn rgb(color: usize) -> [f32; 3] {
    let b: [u8; 3] = match color {
        0 => [255, 0, 0],
        1 => [0, 255, 0],
        2 => [0, 0, 255],
        3 => [255, 255, 0],
        4 => [255, 0, 255],
        5 => [0, 255, 255],
        6 => [255, 255, 255],
        _ => [255, 153, 0],
    };
    b.map(level)
}

pub fn level(b: u8) -> f32 {
    f32::from(b) / 255.0
}

pub const GRAY: u8 = 128;

/// Index of the palette entry equal to `px`, if any.
pub fn color_of(px: [f32; 3]) -> Option<usize> {
    (0..COLORS.len()).find(|&c| {
        rgb(c)
            .iter()
            .zip(px)
            .all(|(a, b)| (a - b).abs() < 1.0 / 255.0)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];

    /// Lattice offset `(drow, dcol)` from the reference to the target.
    fn offset(self) -> (isize, isize) {
        match self {
            Relation::Left => (0, -1),
            Relation::Right => (0, 1),
            Relation::Above => (-1, 0),
            Relation::Below => (1, 0),
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Relation::Left => "left of",
            Relation::Right => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneQuestion {
    /// Color of the object with this shape.
    Direct { shape: usize },
    /// Color of the object related to the one with this shape.
    Relational { shape: usize, relation: Relation },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub lattice: usize,
    pub objects: Vec<SceneObject>,
}

/// Generator knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub lattice: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relational questions per 4 (the rest ask about a shape directly).
    pub relational_per_4: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lattice: 3,
            min_objects: 2,
            max_objects: 4,
            relational_per_4: 3,
        }
    }
}

impl SceneSpec {
    fn at(&self, row: isize, col: isize) -> Option<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.row as isize == row && o.col as isize == col)
    }

    fn by_shape(&self, shape: usize) -> Option<&SceneObject> {
        let mut it = self.objects.iter().filter(|o| o.shape == shape);
        match (it.next(), it.next()) {
            (Some(o), None) => Some(o),
            _ => None,
        }
    }

    /// The object a question refers to, if exactly one does.
    pub fn resolve(&self, q: SceneQuestion) -> Option<&SceneObject> {
        match q {
            SceneQuestion::Direct { shape } => self.by_shape(shape),
            SceneQuestion::Relational { shape, relation } => {
                let r = self.by_shape(shape)?;
                let (dr, dc) = relation.offset();
                self.at(r.row as isize + dr, r.col as isize + dc)
            }
        }
    }

    /// Draws each object centered in its lattice cell on black.
    pub fn render(&self, size: usize) -> ImageGrid {
        let mut img = ImageGrid::filled(size, size, 3, 0.0);
        let cell = size / self.lattice;
        for o in &self.objects {
            let (y0, x0) = (o.row * cell, o.col * cell);
            draw_shape(&mut img, o.shape, y0, x0, cell, rgb(o.color));
        }
        img
    }
}

/// Shape glyph within a `cell`-sized square; the cell center is always
/// painted.
pub fn draw_shape(img: &mut ImageGrid, shape: usize, y0: usize, x0: usize, cell: usize, color: [f32; 3]) {
    let m = (cell / 6).max(1);
    let (lo, hi) = (m, cell - m);
    let c = cell as f32 / 2.0;
    let r = (hi - lo) as f32 / 2.0;
    for dy in lo..hi {
        for dx in lo..hi {
            let (fy, fx) = (dy as f32 + 0.5 - c, dx as f32 + 0.5 - c);
            let inside = match shape {
                0 => true,
                1 => fy * fy + fx * fx <= r * r,
                2 => fx.abs() <= (fy + r) / 2.0,
                _ => fx.abs() < r / 3.0 || fy.abs() < r / 3.0,
            };
            if inside {
                img.set(y0 + dy, x0 + dx, color);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: ImageGrid,
    pub question: String,
    pub answer: String,
}

pub fn question_text(q: SceneQuestion) -> String {
    match q {
        SceneQuestion::Direct { shape } => format!("what is the color of the {} ?", SHAPES[shape]),
        SceneQuestion::Relational { shape, relation } => format!(
            "what is the color of the shape {} the {} ?",
            relation.phrase(),
            SHAPES[shape]
        ),
    }
}

/// Renders `spec` and checks the question is answerable from pixels alone:
/// the answer is read back from the target's cell center.
pub fn realize(spec: SceneSpec, q: SceneQuestion, size: usize) -> Result<Scene> {
    let target = *spec
        .resolve(q)
        .ok_or_else(|| Error::Dataset(format!("question {q:?} has no unique answer")))?;
    let image = spec.render(size);
    let cell = size / spec.lattice;
    let (y, x) = (target.row * cell + cell / 2, target.col * cell + cell / 2);
    let px = [image.get(y, x, 0), image.get(y, x, 1), image.get(y, x, 2)];
    if color_of(px) != Some(target.color) {
        return Err(Error::Dataset("rendered target does not show its color".into()));
    }
    Ok(Scene {
        answer: COLORS[target.color].to_string(),
        question: question_text(q),
        spec,
        image,
    })
}

fn try_scene(rng: &mut impl Rng, grid: GridSpec, size: usize) -> Option<Scene> {
    let k = rng.random_range(grid.min_objects..=grid.max_objects.min(SHAPES.len()));
    let mut cells: Vec<(usize, usize)> = (0..grid.lattice * grid.lattice)
        .map(|i| (i / grid.lattice, i % grid.lattice))
        .collect();
    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    let mut objects = Vec::with_capacity(k);
    for _ in 0..k {
        let (row, col) = cells.swap_remove(rng.random_range(0..cells.len()));
        let shape = shapes.swap_remove(rng.random_range(0..shapes.len()));
        objects.push(SceneObject {
            color: rng.random_range(0..COLORS.len()),
            shape,
            row,
            col,
        });
    }
    let spec = SceneSpec {
        lattice: grid.lattice,
        objects,
    };
    let relational = k > 1 && rng.random_range(0..4) < grid.relational_per_4;
    let q = if relational {
        let options: Vec<SceneQuestion> = spec
            .objects
            .iter()
            .flat_map(|o| {
                Relation::ALL.into_iter().map(move |relation| SceneQuestion::Relational {
                    shape: o.shape,
                    relation,
                })
            })
            .filter(|&q| spec.resolve(q).is_some())
            .collect();
        *options.choose(rng)?
    } else {
        SceneQuestion::Direct {
            shape: spec.objects[rng.random_range(0..k)].shape,
        }
    };
    realize(spec, q, size).ok()
}

/// A random scene and question. Unsatisfiable draws are retried on the next
/// substream of `seeds`.
pub fn gen_scene(seeds: &SeedStream, grid: GridSpec, size: usize) -> Result<Scene> {
    if grid.lattice == 0 || size < grid.lattice * 4 || grid.min_objects == 0 || grid.min_objects > grid.max_objects {
        return Err(Error::Config(format!("unusable scene spec {grid:?} at {size}px")));
    }
    for attempt in 0..1000 {
        if let Some(s) = try_scene(&mut seeds.index(attempt).rng(), grid, size) {
            return Ok(s);
        }
    }
    Err(Error::Dataset("no satisfiable scene in 1000 attempts".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_square() {
        let spec = SceneSpec {
            lattice: 3,
            objects: vec![SceneObject {
                color: 0,
                shape: 0,
                row: 1,
                col: 1,
            }],
        };
        let s = realize(spec, SceneQuestion::Direct { shape: 0 }, 36).unwrap();
        assert_eq!(s.question, "what is the color of the square ?");
        assert_eq!(s.answer, "red");
    }

    #[test]
    fn relation_resolves_neighbor() {
        let spec = SceneSpec {
            lattice: 3,
            objects: vec![
                SceneObject { color: 2, shape: 1, row: 0, col: 0 },
                SceneObject { color: 3, shape: 0, row: 0, col: 1 },
            ],
        };
        let q = SceneQuestion::Relational { shape: 0, relation: Relation::Left };
        assert_eq!(realize(spec.clone(), q, 36).unwrap().answer, "blue");
        let q = SceneQuestion::Relational { shape: 0, relation: Relation::Below };
        assert!(realize(spec, q, 36).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_scene(&SeedStream::new(9), GridSpec::default(), 36).unwrap();
        let b = gen_scene(&SeedStream::new(9), GridSpec::default(), 36).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_shape_paints_its_center() {
        for shape in 0..4 {
            let mut img = ImageGrid::filled(12, 12, 3, 0.0);
            draw_shape(&mut img, shape, 0, 0, 12, rgb(1));
            assert_eq!(color_of([img.get(6, 6, 0), img.get(6, 6, 1), img.get(6, 6, 2)]), Some(1));
        }
    }
}
