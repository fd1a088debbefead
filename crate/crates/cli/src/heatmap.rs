use std::path::Path;

use anyhow::{Context, Result};
use aspectree::scoring::ConsistencyMatrix;
use image::{Rgb, RgbImage};

const CELL: u32 = 40;

/// White at -1 through orange to dark red at 1.
fn color(v: f64) -> Rgb<u8> {
    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, u: f64| (a + (b - a) * u).round() as u8;
    if t < 0.5 {
        let u = t * 2.0;
        Rgb([255, lerp(255.0, 170.0, u), lerp(255.0, 60.0, u)])
    } else {
        let u = (t - 0.5) * 2.0;
        Rgb([lerp(255.0, 130.0, u), lerp(170.0, 0.0, u), lerp(60.0, 20.0, u)])
    }
}

/// One square per matrix entry, separated by a 1-pixel grid.
pub fn render(m: &ConsistencyMatrix, path: &Path) -> Result<()> {
    let n = m.labels.len() as u32;
    let side = n * CELL + 1;
    let mut img = RgbImage::from_pixel(side, side, Rgb([40, 40, 40]));
    for i in 0..n {
        for j in 0..n {
            let c = color(m.get(i as usize, j as usize));
            for y in 1..CELL {
                for x in 1..CELL {
                    img.put_pixel(j * CELL + x, i * CELL + y, c);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_scale_is_monotone_in_red_and_green() {
        let a = color(-1.0);
        let b = color(0.0);
        let c = color(1.0);
        assert_eq!(a, Rgb([255, 255, 255]));
        assert!(b[1] < a[1] && c[1] < b[1]);
        assert!(c[0] < b[0]);
    }
}
