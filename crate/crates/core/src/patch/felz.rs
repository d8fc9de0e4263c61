//! Graph-based segmentation by greedy merging of sorted pixel edges.

use serde::{Deserialize, Serialize};

use super::{Components, PatchSegmentation};
use crate::image::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeight {
    /// Euclidean distance between RGB triples.
    Rgb,
    /// Absolute difference of luma.
    Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FelzParams {
    /// `k` in the size-dependent threshold `k / |C|`.
    pub scale: f32,
    pub min_component_size: usize,
    /// 4 or 8.
    pub edge_connectivity: u8,
    pub weight: EdgeWeight,
}

impl Default for FelzParams {
    fn default() -> Self {
        Self { scale: 300.0, min_component_size: 64, edge_connectivity: 8, weight: EdgeWeight::Rgb }
    }
}

impl FelzParams {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", format!("{} must be positive", self.scale)));
        }
        if self.min_component_size == 0 {
            return Err(Error::invalid("min_component_size", "must be at least 1"));
        }
        if self.edge_connectivity != 4 && self.edge_connectivity != 8 {
            return Err(Error::invalid("edge_connectivity", format!("{} is not 4 or 8", self.edge_connectivity)));
        }
        Ok(())
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest edge weight merged inside the component (valid at roots).
    internal: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the merged component's internal difference becomes `w`.
    fn union(&mut self, a: usize, b: usize, w: f32) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = w.max(self.internal[big]).max(self.internal[small]);
    }

    fn threshold(&self, root: usize, k: f32) -> f32 {
        self.internal[root] + k / self.size[root] as f32
    }
}

struct Edge {
    w: f32,
    a: usize,
    b: usize,
}

fn edge_weight(kind: EdgeWeight, p: [u8; 3], q: [u8; 3]) -> f32 {
    match kind {
        EdgeWeight::Rgb => (0..3).map(|c| (p[c] as f32 - q[c] as f32).powi(2)).sum::<f32>().sqrt(),
        EdgeWeight::Intensity => {
            let luma = |v: [u8; 3]| 0.299 * v[0] as f32 + 0.587 * v[1] as f32 + 0.114 * v[2] as f32;
            (luma(p) - luma(q)).abs()
        }
    }
}

fn build_edges(img: &RgbImage, params: &FelzParams) -> Vec<Edge> {
    let (w, h) = (img.width(), img.height());
    let mut edges = Vec::with_capacity(w * h * params.edge_connectivity as usize / 2);
    let mut push = |x: usize, y: usize, nx: usize, ny: usize| {
        edges.push(Edge {
            w: edge_weight(params.weight, img.pixel(x, y), img.pixel(nx, ny)),
            a: y * w + x,
            b: ny * w + nx,
        });
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                push(x, y, x + 1, y);
            }
            if y + 1 < h {
                push(x, y, x, y + 1);
            }
            if params.edge_connectivity == 8 && y + 1 < h {
                if x + 1 < w {
                    push(x, y, x + 1, y + 1);
                }
                if x > 0 {
                    push(x, y, x - 1, y + 1);
                }
            }
        }
    }
    edges.sort_by(|e, f| e.w.total_cmp(&f.w).then(e.a.cmp(&f.a)).then(e.b.cmp(&f.b)));
    edges
}

pub fn felz_segment(img: &RgbImage, params: &FelzParams) -> Result<PatchSegmentation> {
    params.validate()?;
    let n = img.pixel_count();
    let edges = build_edges(img, params);
    let mut set = DisjointSet::new(n);

    for e in &edges {
        let ra = set.find(e.a);
        let rb = set.find(e.b);
        if ra != rb && e.w <= set.threshold(ra, params.scale).min(set.threshold(rb, params.scale)) {
            set.union(ra, rb, e.w);
        }
    }

    // Small components join the neighbour across their cheapest edge.
    if params.min_component_size > 1 {
        for e in &edges {
            let ra = set.find(e.a);
            let rb = set.find(e.b);
            if ra != rb && (set.size[ra] < params.min_component_size || set.size[rb] < params.min_component_size) {
                set.union(ra, rb, e.w);
            }
        }
    }

    // Diagonal-only links from 8-connectivity are split so every patch is 4-connected.
    let roots: Vec<i64> = (0..n).map(|p| set.find(p) as i64).collect();
    let comps = Components::label4(img.width(), img.height(), &roots);
    let ids: Vec<u32> = comps.id.iter().map(|&c| c as u32).collect();
    PatchSegmentation::from_labels(img.width(), img.height(), &ids)
}
