//! 3D connected-component labeling for binary masks.
//!
//! Labeling runs a raster-scan union-find pass over the foreground; the
//! tests check it against a naive breadth-first flood fill.

use crate::error::Result;
use crate::volume::MaskVolume;

/// Neighborhood used when deciding voxel adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets with a negative linear order (already-scanned
    /// voxels only), enough for a forward raster union pass.
    fn backward_offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1i64..=0 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dz, dy, dx) >= (0, 0, 0) {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan <= 2,
                        Connectivity::TwentySix => manhattan <= 3,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    pub fn from_u8(v: u8) -> Option<Connectivity> {
        match v {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
        _ => None,
        }
    }
}

/// One connected foreground region, stored as sorted linear voxel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub voxels: Vec<u32>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Anchor to the smaller root so component ids stay ordered by
            // minimum linear index.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Partition the mask foreground into connected components, ordered by
/// each component's minimum linear index; voxels within a component are
/// sorted ascending.
pub fn connected_components(mask: &MaskVolume, connectivity: Connectivity) -> Vec<Component> {
    let (nx, ny, nz) = mask.shape();
    let data = mask.data();
    let fg: Vec<u32> = data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i as u32)
        .collect();
    if fg.is_empty() {
        return Vec::new();
    }

    // Compact id per foreground voxel.
    let mut compact = vec![u32::MAX; data.len()];
    for (ci, &lin) in fg.iter().enumerate() {
        compact[lin as usize] = ci as u32;
    }

    let offsets = connectivity.backward_offsets();
    let mut uf = UnionFind::new(fg.len());
    for (ci, &lin) in fg.iter().enumerate() {
        let lin = lin as usize;
        let i = (lin % nx) as i64;
        let j = ((lin / nx) % ny) as i64;
        let k = (lin / (nx * ny)) as i64;
        for &(dx, dy, dz) in &offsets {
            let (pi, pj, pk) = (i + dx, j + dy, k + dz);
            if pi < 0 || pj < 0 || pk < 0 || pi >= nx as i64 || pj >= ny as i64 || pk >= nz as i64 {
                continue;
            }
            let plin = pi as usize + nx * (pj as usize + ny * pk as usize);
            if data[plin] == 1 {
                uf.union(ci as u32, compact[plin]);
            }
        }
    }

    let mut groups: std::collections::BTreeMap<u32, Vec<u32>> = std::collections::BTreeMap::new();
    for (ci, &lin) in fg.iter().enumerate() {
        let root = uf.find(ci as u32);
        groups.entry(fg[root as usize]).or_default().push(lin);
    }
    groups
        .into_values()
        .map(|mut voxels| {
            voxels.sort_unstable();
            Component { voxels }
        })
        .collect()
}

/// Rebuild a mask from a set of components on the given grid shape.
pub fn components_to_mask(
    components: &[&Component],
    shape: (usize, usize, usize),
) -> Result<MaskVolume> {
    let mut mask = MaskVolume::zeros(shape);
    let n = mask.data().len() as u32;
    for comp in components {
        for &v in &comp.voxels {
            if v >= n {
                return Err(crate::error::Error::Validation(format!(
                    "component voxel {v} outside grid of {n} voxels"
                )));
            }
            mask.data_mut()[v as usize] = 1;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive BFS flood fill, the independent reference for the union-find
    /// implementation above.
    pub fn flood_fill_components(mask: &MaskVolume, connectivity: Connectivity) -> Vec<Component> {
        let (nx, ny, nz) = mask.shape();
        let data = mask.data();
        let conn = connectivity.as_u8();
        let mut seen = vec![false; data.len()];
        let mut out = Vec::new();
        for start in 0..data.len() {
            if data[start] != 1 || seen[start] {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([start]);
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(lin) = queue.pop_front() {
                comp.push(lin as u32);
                let i = (lin % nx) as i64;
                let j = ((lin / nx) % ny) as i64;
                let k = (lin / (nx * ny)) as i64;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let manhattan = dx.abs() + dy.abs() + dz.abs();
                            let ok = match conn {
                                6 => manhattan == 1,
                                18 => manhattan <= 2,
                                _ => true,
                            };
                            if !ok {
                                continue;
                            }
                            let (pi, pj, pk) = (i + dx, j + dy, k + dz);
                            if pi < 0
                                || pj < 0
                                || pk < 0
                                || pi >= nx as i64
                                || pj >= ny as i64
                                || pk >= nz as i64
                            {
                                continue;
                            }
                            let plin = pi as usize + nx * (pj as usize + ny * pk as usize);
                            if data[plin] == 1 && !seen[plin] {
                                seen[plin] = true;
                                queue.push_back(plin);
                            }
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(Component { voxels: comp });
        }
        out.sort_by_key(|c| c.voxels[0]);
        out
    }

    fn mask_from_coords(shape: (usize, usize, usize), coords: &[(usize, usize, usize)]) -> MaskVolume {
        let mut m = MaskVolume::zeros(shape);
        for &(i, j, k) in coords {
            m.set(i, j, k, 1);
        }
        m
    }

    #[test]
    fn single_voxel() {
        let m = mask_from_coords((4, 4, 4), &[(1, 2, 3)]);
        let comps = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 1);
    }

    #[test]
    fn empty_mask() {
        let m = MaskVolume::zeros((4, 4, 4));
        assert!(connected_components(&m, Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn corner_touch_depends_on_connectivity() {
        let m = mask_from_coords((4, 4, 4), &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn edge_touch_at_eighteen() {
        let m = mask_from_coords((4, 4, 4), &[(0, 0, 0), (1, 1, 0)]);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn deterministic_ordering_by_min_index() {
        let m = mask_from_coords((8, 1, 1), &[(6, 0, 0), (0, 0, 0), (3, 0, 0)]);
        let comps = connected_components(&m, Connectivity::Six);
        let firsts: Vec<u32> = comps.iter().map(|c| c.voxels[0]).collect();
        assert_eq!(firsts, vec![0, 3, 6]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        #[test]
        fn agrees_with_flood_fill(bits in proptest::collection::vec(0u8..=1, 512),
                                  conn in prop_oneof![Just(Connectivity::Six),
                                                      Just(Connectivity::Eighteen),
                                                      Just(Connectivity::TwentySix)]) {
            let mask = MaskVolume::new(bits, (8, 8, 8), [1.0; 3], crate::volume::Orientation::Axial).unwrap();
            let got = connected_components(&mask, conn);
            let expected = flood_fill_components(&mask, conn);
            prop_assert_eq!(&got, &expected);

            // Components partition the foreground.
            let mut union: Vec<u32> = got.iter().flat_map(|c| c.voxels.iter().copied()).collect();
            let total: usize = got.iter().map(|c| c.len()).sum();
            union.sort_unstable();
            union.dedup();
            prop_assert_eq!(union.len(), total);
            prop_assert_eq!(total, mask.foreground_count());
        }
    }
}
