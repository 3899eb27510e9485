//! 26-connected component labelling with union-find.

use crate::volume::{voxel_index, Dims, LabelVolume};

/// Half of the 26-neighbourhood: offsets that precede a voxel in z-major scan order.
const BACKWARD: [(isize, isize, isize); 13] = [
    (-1, -1, -1),
    (-1, -1, 0),
    (-1, -1, 1),
    (-1, 0, -1),
    (-1, 0, 0),
    (-1, 0, 1),
    (-1, 1, -1),
    (-1, 1, 0),
    (-1, 1, 1),
    (0, -1, -1),
    (0, -1, 0),
    (0, -1, 1),
    (0, 0, -1),
];

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let gp = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = gp;
            i = gp;
        }
        i
    }

    /// Roots are always the smallest voxel index of their set.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Component root of every voxel whose label equals its neighbour's label.
/// Each root is the first voxel of its component in z-major order.
fn component_roots(labels: &[u8], dims: Dims) -> Vec<u32> {
    let n = labels.len();
    assert!(n <= u32::MAX as usize, "volume too large for component labelling");
    let mut ds = DisjointSet {
        parent: (0..n as u32).collect(),
    };
    let [nz, ny, nx] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = voxel_index(dims, z, y, x);
                let l = labels[i];
                if l == 0 {
                    continue;
                }
                for (dz, dy, dx) in BACKWARD {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz < 0 || yy < 0 || xx < 0 || yy >= ny as isize || xx >= nx as isize {
                        continue;
                    }
                    let j = voxel_index(dims, zz as usize, yy as usize, xx as usize);
                    if labels[j] == l {
                        ds.union(i as u32, j as u32);
                    }
                }
            }
        }
    }
    (0..n as u32).map(|i| ds.find(i)).collect()
}

/// Number of 26-connected components of `class`.
pub fn count_components(l: &LabelVolume, class: u8) -> usize {
    let roots = component_roots(&l.data, l.dims);
    l.data
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v == class && roots[i] as usize == i)
        .count()
}

/// Keeps only the largest 26-connected component of every foreground class;
/// all other foreground voxels become background. Equal-sized components are
/// resolved in favour of the one reached first in z-major scan order.
pub fn largest_component_filter(l: &LabelVolume) -> LabelVolume {
    let roots = component_roots(&l.data, l.dims);
    let mut sizes = vec![0u32; l.data.len()];
    for (i, &v) in l.data.iter().enumerate() {
        if v != 0 {
            sizes[roots[i] as usize] += 1;
        }
    }
    let mut best: [Option<(u32, u32)>; 256] = [None; 256];
    for (i, &v) in l.data.iter().enumerate() {
        if v == 0 || roots[i] as usize != i {
            continue;
        }
        let size = sizes[i];
        match best[v as usize] {
            Some((_, s)) if s >= size => {}
            _ => best[v as usize] = Some((i as u32, size)),
        }
    }
    let data = l
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| match best[v as usize] {
            Some((root, _)) if v != 0 && roots[i] == root => v,
            _ => 0,
        })
        .collect();
    LabelVolume {
        dims: l.dims,
        spacing: l.spacing,
        data,
    }
}
