//! Fifteen glyph masks defined on the unit square.

/// Whether point `(u, v)` in `[0,1]^2` lies inside glyph `s`.
fn inside(s: usize, u: f64, v: f64) -> bool {
    let (cx, cy) = (u - 0.5, v - 0.5);
    let r = (cx * cx + cy * cy).sqrt();
    match s {
        // filled square
        0 => (0.1..0.9).contains(&u) && (0.1..0.9).contains(&v),
        // disc
        1 => r < 0.42,
        // upward triangle
        2 => v > 0.1 && v < 0.9 && cx.abs() < (v - 0.1) * 0.5,
        // plus
        3 => (cx.abs() < 0.12 && cy.abs() < 0.45) || (cy.abs() < 0.12 && cx.abs() < 0.45),
        // diagonal cross
        4 => ((cx - cy).abs() < 0.14 || (cx + cy).abs() < 0.14) && r < 0.5,
        // ring
        5 => (0.28..0.45).contains(&r),
        // horizontal bar
        6 => cy.abs() < 0.15 && cx.abs() < 0.45,
        // vertical bar
        7 => cx.abs() < 0.15 && cy.abs() < 0.45,
        // diamond
        8 => cx.abs() + cy.abs() < 0.45,
        // L shape
        9 => (u > 0.1 && u < 0.35 && v > 0.1 && v < 0.9) || (v > 0.65 && v < 0.9 && u > 0.1 && u < 0.9),
        // T shape
        10 => (v > 0.1 && v < 0.35 && u > 0.1 && u < 0.9) || (cx.abs() < 0.13 && v > 0.1 && v < 0.9),
        // hollow square
        11 => {
            let outer = cx.abs().max(cy.abs());
            outer < 0.42 && outer > 0.26
        }
        // upper half disc
        12 => r < 0.45 && cy < 0.05,
        // 2x2 checker
        13 => cx.abs() < 0.42 && cy.abs() < 0.42 && ((cx < 0.0) == (cy < 0.0)),
        // hourglass
        14 => cy.abs() < 0.42 && cx.abs() < cy.abs() + 0.04,
        _ => panic!("glyph index {s} out of range"),
    }
}

pub const NUM_GLYPHS: usize = 15;

/// Boolean mask of glyph `s` rasterised at `px x px` by pixel-centre sampling.
pub fn raster(s: usize, px: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(px * px);
    for y in 0..px {
        for x in 0..px {
            let u = (x as f64 + 0.5) / px as f64;
            let v = (y as f64 + 0.5) / px as f64;
            m.push(inside(s, u, v));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_nonempty_and_distinct() {
        let masks: Vec<Vec<bool>> = (0..NUM_GLYPHS).map(|s| raster(s, 12)).collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.iter().filter(|&&b| b).count() >= 12, "glyph {i} too small");
            for b in &masks[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
