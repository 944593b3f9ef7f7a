//! Toy image benchmark with controllable spurious correlation.
//!
//! Each sample has 15 latent bits. `z_1..z_5` are fair coins; the rest are
//! chained copies: `z_{s+5}` follows `z_s` and `z_{s+10}` follows `z_{s+5}`,
//! each agreeing with its parent with probability `p_cor`. Labels depend on
//! `z_1..z_5` only. Shape `s` is drawn iff `z_s = 1`, in its own cell of a
//! 4x4 grid, with per-sample random cell, jitter and colour.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{raster, NUM_GLYPHS};
use super::rules::{labels_from_latents, rule_table, validate_table, Formula};
use super::{Dataset, Inputs, Task};
use crate::rng::derived_rng;
use crate::{Error, Result};

pub const NUM_SHAPES: usize = 15;
const GRID: usize = 4;
pub const MIN_CANVAS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub num_samples: usize,
    pub canvas_size: usize,
    pub num_shapes: usize,
    pub p_cor: f64,
    pub base_seed: u64,
    #[serde(skip, default = "rule_table")]
    pub rule_table: Vec<Formula>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_samples: 20_000,
            canvas_size: 64,
            num_shapes: NUM_SHAPES,
            p_cor: 0.75,
            base_seed: 0,
            rule_table: rule_table(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.p_cor) {
            return Err(Error::Invalid(format!("p_cor {} outside [0.5, 1.0]", self.p_cor)));
        }
        if self.num_shapes != NUM_SHAPES {
            return Err(Error::Invalid(format!("num_shapes must be {NUM_SHAPES}, got {}", self.num_shapes)));
        }
        if self.canvas_size < MIN_CANVAS {
            return Err(Error::Invalid(format!(
                "canvas {}px cannot fit {NUM_SHAPES} shapes on a {GRID}x{GRID} grid (minimum {MIN_CANVAS}px)",
                self.canvas_size
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Invalid("num_samples must be positive".into()));
        }
        validate_table(&self.rule_table).map_err(Error::Invalid)
    }
}

fn bern(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Draw the 15 latent bits (bit `s` holds `z_{s+1}`).
fn draw_latents(rng: &mut impl Rng, p_cor: f64) -> u16 {
    let mut z = 0u16;
    for s in 0..5 {
        if bern(rng, 0.5) {
            z |= 1 << s;
        }
    }
    for s in 5..NUM_SHAPES {
        let parent = z >> (s - 5) & 1 == 1;
        let p = if parent { p_cor } else { 1.0 - p_cor };
        if bern(rng, p) {
            z |= 1 << s;
        }
    }
    z
}

struct Placement {
    cells: Vec<usize>,
    jitter: Vec<(usize, usize)>,
    colors: Vec<[u8; 3]>,
}

fn draw_placement(rng: &mut impl Rng, cell: usize, glyph: usize) -> Placement {
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let slack = cell - glyph;
    let mut jitter = Vec::with_capacity(NUM_SHAPES);
    let mut colors = Vec::with_capacity(NUM_SHAPES);
    for _ in 0..NUM_SHAPES {
        jitter.push((rng.random_range(0..=slack), rng.random_range(0..=slack)));
        colors.push([rng.random_range(64..=255), rng.random_range(64..=255), rng.random_range(64..=255)]);
    }
    cells.truncate(NUM_SHAPES);
    Placement { cells, jitter, colors }
}

fn glyph_size(canvas: usize) -> (usize, usize) {
    let cell = canvas / GRID;
    (cell, (cell * 3) / 4)
}

/// Latents and image of sample `i`. Shapes whose bit is set in `hide` are
/// left out of the drawing without disturbing any other random draw.
pub fn render_sample(cfg: &ToyConfig, i: usize, hide: u16, masks: &[Vec<bool>]) -> (u16, Vec<u8>) {
    let size = cfg.canvas_size;
    let (cell, glyph) = glyph_size(size);
    let mut rng = derived_rng(cfg.base_seed, i as u64);
    let z = draw_latents(&mut rng, cfg.p_cor);
    let place = draw_placement(&mut rng, cell, glyph);
    let mut img = vec![0u8; size * size * 3];
    for s in 0..NUM_SHAPES {
        if z >> s & 1 == 0 || hide >> s & 1 == 1 {
            continue;
        }
        let c = place.cells[s];
        let (x0, y0) = ((c % GRID) * cell + place.jitter[s].0, (c / GRID) * cell + place.jitter[s].1);
        for gy in 0..glyph {
            for gx in 0..glyph {
                if masks[s][gy * glyph + gx] {
                    let p = ((y0 + gy) * size + x0 + gx) * 3;
                    img[p..p + 3].copy_from_slice(&place.colors[s]);
                }
            }
        }
    }
    (z, img)
}

pub(crate) fn glyph_masks(canvas: usize) -> Vec<Vec<bool>> {
    let (_, glyph) = glyph_size(canvas);
    (0..NUM_GLYPHS).map(|s| raster(s, glyph)).collect()
}

pub fn gen_toy_dataset(cfg: &ToyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let size = cfg.canvas_size;
    let masks = glyph_masks(size);
    let n = cfg.num_samples;
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    let mut latents = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n * NUM_SHAPES);
    for i in 0..n {
        let (z, img) = render_sample(cfg, i, 0, &masks);
        pixels.extend_from_slice(&img);
        latents.push(z);
        let y = labels_from_latents(&cfg.rule_table, z);
        labels.extend((0..NUM_SHAPES).map(|k| (y >> k & 1) as u32));
    }
    let metadata = serde_json::json!({
        "source": "toy",
        "config": cfg,
        "rule_table": cfg.rule_table.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
        "latent_bits": "bit s of z holds z_{s+1}; label k is rule_table[k] applied to z_1..z_5",
    });
    Ok(Dataset {
        task: Task::MultilabelBinary { labels: NUM_SHAPES },
        inputs: Inputs::Images { size, pixels, latents },
        labels,
        vocab: None,
        metadata,
        splits: BTreeMap::new(),
    })
}

/// Latent bits only, without rendering; identical to the `z` that
/// [`gen_toy_dataset`] would store for the same config.
pub fn sample_toy_latents(cfg: &ToyConfig) -> Result<Vec<u16>> {
    cfg.validate()?;
    Ok((0..cfg.num_samples)
        .map(|i| draw_latents(&mut derived_rng(cfg.base_seed, i as u64), cfg.p_cor))
        .collect())
}
