//! SVG overlays: target in green, compressed footprint in translucent grey,
//! dispense path as a light-yellow polyline.

use std::fmt::Write;

use crate::geometry::{DispensePath, GridSpec};
use crate::raster::Mask;

const PX_PER_CELL: usize = 8;
const TARGET_FILL: &str = "#3a9d4f";
const FOOTPRINT_FILL: &str = "#9a9a9a";
const PATH_STROKE: &str = "#fff3a0";

/// Horizontal runs of set cells as `(x, y, len)`.
fn runs(mask: &Mask) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height() {
        let mut x = 0;
        while x < mask.width() {
            if mask.get(x, y) {
                let start = x;
                while x < mask.width() && mask.get(x, y) {
                    x += 1;
                }
                out.push((start, y, x - start));
            } else {
                x += 1;
            }
        }
    }
    out
}

fn cells_group(svg: &mut String, mask: &Mask, fill: &str, opacity: f64) {
    let _ = writeln!(svg, r#"<g fill="{fill}" fill-opacity="{opacity}">"#);
    for (x, y, len) in runs(mask) {
        let _ = writeln!(svg, r#"<rect x="{x}" y="{y}" width="{len}" height="1"/>"#);
    }
    svg.push_str("</g>\n");
}

/// Renders one overlay; `footprint` may be omitted (e.g. degenerate paths).
pub fn overlay_svg(grid: &GridSpec, target: &Mask, footprint: Option<&Mask>, path: Option<&DispensePath>) -> String {
    let (w, h) = (grid.width_cells(), grid.height_cells());
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}">"#,
        w * PX_PER_CELL,
        h * PX_PER_CELL
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#202020"/>"##);
    cells_group(&mut svg, target, TARGET_FILL, 1.0);
    if let Some(fp) = footprint {
        cells_group(&mut svg, fp, FOOTPRINT_FILL, 0.7);
    }
    if let Some(p) = path {
        let pts: Vec<String> = p
            .points()
            .iter()
            .map(|pt| {
                let (x, y) = pt.to_cells(grid);
                format!("{x:.4},{y:.4}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{PATH_STROKE}" stroke-width="0.6" stroke-linejoin="round" stroke-linecap="round"/>"#,
            pts.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Polyline, TargetArea};

    #[test]
    fn overlay_contains_layers_and_six_points() {
        let grid = GridSpec::new(16, 16, 1.0, 1.0).unwrap();
        let mut m = Mask::new(16, 16);
        m.fill_rect(2, 3, 10, 6, true);
        let area = TargetArea::new(m.clone(), grid).unwrap();
        let poly = Polyline::from_coords(&[0.2, 0.3, 0.7, 0.3, 0.7, 0.4, 0.2, 0.4, 0.2, 0.5, 0.7, 0.5]).unwrap();
        let path = DispensePath::for_area(poly, &area, 0.5).unwrap();
        let svg = overlay_svg(&grid, &m, Some(&m), Some(&path));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"<rect x="2" y="#).count(), 12);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 6);
        assert!(svg.contains(TARGET_FILL) && svg.contains(FOOTPRINT_FILL) && svg.contains(PATH_STROKE));
    }
}
