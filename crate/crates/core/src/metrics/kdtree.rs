//! Static 3-d tree for exact nearest-neighbour squared distances.
//!
//! Squared distances are computed as `dx*dx + dy*dy + dz*dz` in that order;
//! callers that need bit-identical results against a brute-force scan must use
//! [`dist2`].

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
pub struct KdTree {
    // Points reordered so every subtree is a contiguous range; the median of a
    // range is its splitting node.
    points: Vec<[f64; 3]>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        build(&mut pts, &mut axes, 0);
        Self { points: pts, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest squared distance from `q` to any stored point; infinity if empty.
    pub fn nearest_dist2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(pts: &mut [[f64; 3]], axes: &mut [u8], depth: usize) {
    if pts.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    // Split on the axis with the largest extent.
    let mut axis = depth % 3;
    let mut widest = -1.0;
    for a in 0..3 {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
            (l.min(p[a]), h.max(p[a]))
        });
        if hi - lo > widest {
            widest = hi - lo;
            axis = a;
        }
    }
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    axes[mid] = axis as u8;
    let (left, rest) = pts.split_at_mut(mid);
    let (laxes, raxes) = axes.split_at_mut(mid);
    build(left, laxes, depth + 1);
    build(&mut rest[1..], &mut raxes[1..], depth + 1);
}
