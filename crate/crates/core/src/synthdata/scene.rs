use crate::image::RgbImage;
use crate::rng::{counter_hash, counter_uniform};

use super::{DataError, Result};

pub(crate) const CELL_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;
pub(crate) const QUESTION_STREAM: u64 = 3;

pub(crate) fn stream(scene_index: usize, kind: u64) -> u64 {
    ((scene_index as u64) << 8) | kind
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Empty,
    BuildingSmall,
    BuildingLarge,
    Road,
    Water,
    Tree,
    Field,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Empty,
        Category::BuildingSmall,
        Category::BuildingLarge,
        Category::Road,
        Category::Water,
        Category::Tree,
        Category::Field,
    ];

    pub fn code(self) -> char {
        match self {
            Category::Empty => 'e',
            Category::BuildingSmall => 's',
            Category::BuildingLarge => 'b',
            Category::Road => 'r',
            Category::Water => 'w',
            Category::Tree => 't',
            Category::Field => 'f',
        }
    }

    pub fn from_code(c: char) -> Option<Category> {
        Category::ALL.into_iter().find(|k| k.code() == c)
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            Category::Empty => [120, 96, 64],
            Category::BuildingSmall => [220, 50, 50],
            Category::BuildingLarge => [245, 170, 30],
            Category::Road => [205, 205, 205],
            Category::Water => [35, 75, 215],
            Category::Tree => [20, 110, 35],
            Category::Field => [170, 215, 90],
        }
    }

    pub fn is_building(self) -> bool {
        matches!(self, Category::BuildingSmall | Category::BuildingLarge)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Cells per side.
    pub grid: usize,
    /// Urban iff building cells make up at least this fraction of the grid.
    pub urban_threshold: f64,
    /// Cell probabilities in [`Category::ALL`] order.
    pub category_probs: [f64; 7],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: 8,
            urban_threshold: 0.0625,
            category_probs: [0.65, 0.03, 0.02, 0.10, 0.02, 0.10, 0.08],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(DataError::InvalidConfig(format!("grid must be at least 2, got {}", self.grid)));
        }
        if self.category_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DataError::InvalidConfig(format!("invalid category probabilities {:?}", self.category_probs)));
        }
        let total: f64 = self.category_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!("category probabilities sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub id: usize,
    pub grid: usize,
    /// Row-major cells.
    pub cells: Vec<Category>,
    pub urban: bool,
}

impl Scene {
    pub fn from_cells(id: usize, grid: usize, cells: Vec<Category>, urban_threshold: f64) -> Scene {
        let buildings = cells.iter().filter(|c| c.is_building()).count();
        let urban = buildings as f64 >= urban_threshold * cells.len() as f64;
        Scene { id, grid, cells, urban }
    }

    pub fn count(&self, category: Category) -> usize {
        self.cells.iter().filter(|&&c| c == category).count()
    }

    /// Cell counts in [`Category::ALL`] order.
    pub fn counts(&self) -> [usize; 7] {
        let mut out = [0; 7];
        for &c in &self.cells {
            out[c as usize] += 1;
        }
        out
    }

    pub fn grid_codes(&self) -> String {
        self.cells.iter().map(|c| c.code()).collect()
    }

    pub fn cell(&self, row: usize, col: usize) -> Category {
        self.cells[row * self.grid + col]
    }
}

/// Samples every cell independently from `cfg.category_probs`, keyed by
/// `(seed, scene index, cell index)`.
pub fn generate_scene(seed: u64, index: usize, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.grid * cfg.grid;
    let cells = (0..n)
        .map(|cell| {
            let u = counter_uniform(seed, stream(index, CELL_STREAM), cell as u64);
            let mut acc = 0.0;
            for (k, &p) in cfg.category_probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Category::ALL[k];
                }
            }
            // rounding in the cumulative sum: fall back to the last category with mass
            let last = cfg.category_probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            Category::ALL[last]
        })
        .collect();
    Ok(Scene::from_cells(index, cfg.grid, cells, cfg.urban_threshold))
}

/// Draws each cell as a solid block (small buildings as a centred half-size block on
/// empty ground), then adds seeded uniform noise of `noise` units per channel.
pub fn render(scene: &Scene, image_size: usize, seed: u64, noise: u8) -> Result<RgbImage> {
    if image_size == 0 || !image_size.is_multiple_of(scene.grid) {
        return Err(DataError::InvalidConfig(format!("image size {image_size} is not divisible by grid {}", scene.grid)));
    }
    let cell_px = image_size / scene.grid;
    let mut img = RgbImage::filled(image_size, image_size, Category::Empty.color());
    for row in 0..scene.grid {
        for col in 0..scene.grid {
            let cat = scene.cell(row, col);
            let (lo, hi) = if cat == Category::BuildingSmall {
                (cell_px / 4, cell_px / 4 + cell_px / 2)
            } else {
                (0, cell_px)
            };
            for y in lo..hi {
                for x in lo..hi {
                    img.set_pixel(col * cell_px + x, row * cell_px + y, cat.color());
                }
            }
        }
    }
    if noise > 0 {
        let span = 2 * noise as u64 + 1;
        let mut pixels = img.pixels().to_vec();
        for (k, p) in pixels.iter_mut().enumerate() {
            let delta = (counter_hash(seed, stream(scene.id, NOISE_STREAM), k as u64) % span) as i32 - noise as i32;
            *p = (*p as i32 + delta).clamp(0, 255) as u8;
        }
        img = RgbImage::new(image_size, image_size, pixels).expect("same dimensions");
    }
    Ok(img)
}
