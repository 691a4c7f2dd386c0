//! Location and edge targets derived from a semantic label map.

use crate::labels::LabelMap;

/// Foreground mask: 0 on background (class 0), 1 elsewhere.
pub fn derive_gt_loc(sem: &LabelMap) -> LabelMap {
    let mut out = sem.clone();
    for v in out.data_mut() {
        *v = u8::from(*v != 0);
    }
    out
}

/// Foreground pixels with an 8-neighbour of a different label, dilated by a
/// `(2r - 1)²` square and clipped back to the foreground. Each batch image is
/// handled independently; pixels outside the image are not neighbours.
pub fn derive_gt_eg(sem: &LabelMap, radius: usize) -> LabelMap {
    let (h, w) = (sem.height(), sem.width());
    let mut out = LabelMap::batch(sem.n(), h, w, vec![0; sem.len()]).expect("same size");
    let reach = radius.max(1) - 1;
    for n in 0..sem.n() {
        let mut core = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = sem.get(n, y, x);
                if v == 0 {
                    continue;
                }
                core[y * w + x] = neighbours(y, x, h, w, 1).any(|(qy, qx)| sem.get(n, qy, qx) != v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                if sem.get(n, y, x) == 0 {
                    continue;
                }
                let hit = core[y * w + x] || neighbours(y, x, h, w, reach).any(|(qy, qx)| core[qy * w + qx]);
                if hit {
                    out.set(n, y, x, 1);
                }
            }
        }
    }
    out
}

/// In-bounds pixels within Chebyshev distance `r` of `(y, x)`, excluding it.
fn neighbours(y: usize, x: usize, h: usize, w: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = y.saturating_sub(r)..(y + r + 1).min(h);
    ys.flat_map(move |qy| {
        let xs = x.saturating_sub(r)..(x + r + 1).min(w);
        xs.map(move |qx| (qy, qx))
    })
    .filter(move |&q| q != (y, x))
}
