use crate::volgrid::{Geometry, LabelMap, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

fn neighbors(geom: &Geometry, conn: Connectivity, idx: usize, out: &mut Vec<usize>) {
    match conn {
        Connectivity::Six => geom.neighbors6(idx, out),
        Connectivity::TwentySix => geom.neighbors26(idx, out),
    }
}

/// Connected components of `mask`, labelled `1..=n` in descending size
/// (ties: smaller first voxel index first). Returns the labels and the
/// component sizes indexed by `label - 1`.
pub fn components(mask: &Mask, conn: Connectivity) -> (LabelMap, Vec<usize>) {
    let geom = *mask.geometry();
    let mut raw = vec![0u32; geom.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let mut nb = Vec::new();
    for start in mask.indices() {
        if raw[start] != 0 {
            continue;
        }
        let l = sizes.len() as u32 + 1;
        raw[start] = l;
        stack.push(start);
        let mut n = 0;
        while let Some(p) = stack.pop() {
            n += 1;
            neighbors(&geom, conn, p, &mut nb);
            for &q in &nb {
                if mask.get(q) && raw[q] == 0 {
                    raw[q] = l;
                    stack.push(q);
                }
            }
        }
        sizes.push(n);
    }
    // components were discovered in index order; stable sort keeps that as the tie rule
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let mut relabel = vec![0u32; sizes.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        relabel[old + 1] = new as u32 + 1;
    }
    let labels = raw.into_iter().map(|l| relabel[l as usize]).collect();
    let sorted = order.iter().map(|&o| sizes[o]).collect();
    (LabelMap::from_labels(geom, labels).expect("same geometry"), sorted)
}

/// Background voxels of `mask` not 26-connected to the grid border.
pub fn enclosed_background(mask: &Mask) -> Mask {
    let geom = *mask.geometry();
    let mut reached = vec![false; geom.len()];
    let mut stack: Vec<usize> = (0..geom.len())
        .filter(|&i| geom.is_border(i) && !mask.get(i))
        .collect();
    for &i in &stack {
        reached[i] = true;
    }
    let mut nb = Vec::new();
    while let Some(p) = stack.pop() {
        geom.neighbors26(p, &mut nb);
        for &q in &nb {
            if !mask.get(q) && !reached[q] {
                reached[q] = true;
                stack.push(q);
            }
        }
    }
    Mask::from_bits(geom, (0..geom.len()).map(|i| !mask.get(i) && !reached[i]).collect()).expect("same geometry")
}
