use crate::grid::{offset, Mask3, Shape3, NEIGHBORS_26};

/// 26-connected components of the voxels selected by `inside`.
///
/// Components are ordered by their first voxel in raster order; each holds
/// linear voxel indices in discovery order.
pub fn components_where<F: Fn(usize) -> bool>(shape: Shape3, inside: F) -> Vec<Vec<usize>> {
    let n: usize = shape.iter().product();
    let plane = shape[1] * shape[2];
    let mut visited = vec![false; n];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if visited[start] || !inside(start) {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let p = (i / plane, (i % plane) / shape[2], i % shape[2]);
            for d in NEIGHBORS_26 {
                if let Some((z, y, x)) = offset(shape, p, d) {
                    let j = (z * shape[1] + y) * shape[2] + x;
                    if !visited[j] && inside(j) {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

pub fn connected_components(mask: &Mask3) -> Vec<Vec<usize>> {
    let data = mask.data();
    components_where(mask.shape(), |i| data[i])
}
