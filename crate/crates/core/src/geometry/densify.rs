use super::{Cell, GeometryError, Result, SparseAltitudeMap};

/// Fills every blank pixel by inverse-distance weighting (`w = 1/d`) of its
/// `k` nearest occupied pixels. Distance ties go to the earlier pixel in
/// row-major order. Occupied pixels are copied unchanged.
pub fn knn_densify(map: &SparseAltitudeMap, k: usize) -> Result<SparseAltitudeMap> {
    if k == 0 {
        return Err(GeometryError::InvalidArgument(
            "k must be at least 1".into(),
        ));
    }
    let found = map.occupied();
    if found < k {
        return Err(GeometryError::TooFewPoints { needed: k, found });
    }
    let (w, h) = (map.width(), map.height());
    let max_ring = w.max(h);
    let mut out = map.clone();
    // (squared distance, row-major index), kept sorted and truncated to k
    let mut best: Vec<(usize, usize)> = Vec::with_capacity(k + 1);
    for y in 0..h {
        for x in 0..w {
            if map.get(x, y).is_some() {
                continue;
            }
            best.clear();
            for ring in 1..=max_ring {
                visit_ring(x, y, ring, w, h, |nx, ny| {
                    if map.get(nx, ny).is_some() {
                        let dx = nx.abs_diff(x);
                        let dy = ny.abs_diff(y);
                        let key = (dx * dx + dy * dy, ny * w + nx);
                        let pos = best.partition_point(|&b| b < key);
                        if pos < k {
                            best.insert(pos, key);
                            best.truncate(k);
                        }
                    }
                });
                // Anything beyond this ring is at least ring+1 away.
                if best.len() == k && best[k - 1].0 < (ring + 1) * (ring + 1) {
                    break;
                }
            }
            let (mut wsum, mut zsum, mut dsum) = (0.0, 0.0, 0.0);
            for &(d2, idx) in &best {
                let cell = map.cells()[idx].expect("occupied");
                let wt = 1.0 / (d2 as f64).sqrt();
                wsum += wt;
                zsum += wt * cell.altitude;
                dsum += wt * cell.depth;
            }
            out.set(
                x,
                y,
                Some(Cell {
                    altitude: zsum / wsum,
                    depth: dsum / wsum,
                }),
            );
        }
    }
    Ok(out)
}

/// Calls `f` for every in-bounds pixel at Chebyshev distance `ring`.
fn visit_ring(
    x: usize,
    y: usize,
    ring: usize,
    w: usize,
    h: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (x, y, r) = (x as isize, y as isize, ring as isize);
    let inside = |px: isize, py: isize| px >= 0 && py >= 0 && px < w as isize && py < h as isize;
    for py in [y - r, y + r] {
        for px in x - r..=x + r {
            if inside(px, py) {
                f(px as usize, py as usize);
            }
        }
    }
    for py in y - r + 1..y + r {
        for px in [x - r, x + r] {
            if inside(px, py) {
                f(px as usize, py as usize);
            }
        }
    }
}
