use crate::error::{Result, SvrbError};

/// Boundary edge of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Bottom,
    Top,
    Left,
    Right,
}

impl Edge {
    fn bit(self) -> u8 {
        match self {
            Edge::Bottom => 1,
            Edge::Top => 2,
            Edge::Left => 4,
            Edge::Right => 8,
        }
    }
}

/// Uniform triangulation of (0,1)^2 with `n` cells per side, each cell cut along
/// its lower-left to upper-right diagonal. Nodes are numbered row-major.
#[derive(Debug, Clone)]
pub struct MeshGrid {
    n: usize,
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    tags: Vec<u8>,
}

impl MeshGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SvrbError::Config("mesh subdivisions must be >= 1".into()));
        }
        let side = n + 1;
        let h = 1.0 / n as f64;
        let mut coords = Vec::with_capacity(side * side);
        let mut tags = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                coords.push([i as f64 * h, j as f64 * h]);
                let mut t = 0;
                if j == 0 {
                    t |= Edge::Bottom.bit();
                }
                if j == n {
                    t |= Edge::Top.bit();
                }
                if i == 0 {
                    t |= Edge::Left.bit();
                }
                if i == n {
                    t |= Edge::Right.bit();
                }
                tags.push(t);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let v00 = j * side + i;
                let v10 = v00 + 1;
                let v01 = v00 + side;
                let v11 = v01 + 1;
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        Ok(Self {
            n,
            coords,
            triangles,
            tags,
        })
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn on_edge(&self, node: usize, edge: Edge) -> bool {
        self.tags[node] & edge.bit() != 0
    }

    /// Twice the signed area of triangle `t`.
    pub fn signed_area2(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.coords[a], self.coords[b], self.coords[c]);
        (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
    }

    /// Triangle containing `p` and its barycentric weights, or `None` outside the closed square.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            return None;
        }
        let n = self.n as f64;
        let i = ((p[0] * n).floor() as usize).min(self.n - 1);
        let j = ((p[1] * n).floor() as usize).min(self.n - 1);
        let base = 2 * (j * self.n + i);
        for t in [base, base + 1] {
            let w = self.barycentric(t, p);
            if w.iter().all(|&x| x >= -1e-12) {
                return Some((t, w));
            }
        }
        None
    }

    fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.coords[a], self.coords[b], self.coords[c]);
        let det = self.signed_area2(t);
        let l1 = ((pb[0] - p[0]) * (pc[1] - p[1]) - (pc[0] - p[0]) * (pb[1] - p[1])) / det;
        let l2 = ((pc[0] - p[0]) * (pa[1] - p[1]) - (pa[0] - p[0]) * (pc[1] - p[1])) / det;
        [l1, l2, 1.0 - l1 - l2]
    }
}
