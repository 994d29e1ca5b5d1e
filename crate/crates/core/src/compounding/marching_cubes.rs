//! Marching cubes over a [`LabelVolume`].
//!
//! The 256-entry triangulation table is derived at first use from per-face
//! rules instead of being typed in. On every cube face the iso-contour
//! segments cut off each inside corner run separately (ambiguous faces keep
//! their two inside corners apart). Because that choice depends only on the
//! face's own four corners, neighbouring cubes always agree on the shared
//! face and the extracted surface is closed wherever it does not leave the
//! grid. Segments are directed with the inside region on their left when the
//! face is viewed from outside the cube, which orients every contour loop
//! consistently.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::LabelVolume;
use crate::geometry::Vec3;
use crate::mesh::TriMesh;

/// Corner offsets, standard numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Edge endpoints as corner indices.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Cube faces as cyclic corner lists plus outward normal.
const FACES: [([usize; 4], [i32; 3]); 6] = [
    ([0, 1, 2, 3], [0, 0, -1]),
    ([4, 5, 6, 7], [0, 0, 1]),
    ([0, 1, 5, 4], [0, -1, 0]),
    ([3, 2, 6, 7], [0, 1, 0]),
    ([0, 3, 7, 4], [-1, 0, 0]),
    ([1, 2, 6, 5], [1, 0, 0]),
];

/// Oriented contour loops (cube edge indices) for each of the 256 corner
/// sign cases. Bit `c` of the case index is set when corner `c` is inside
/// (value > iso).
pub fn loop_table() -> &'static [Vec<Vec<u8>>; 256] {
    static TABLE: OnceLock<[Vec<Vec<u8>>; 256]> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners are adjacent")
}

fn corner_pos(c: usize) -> Vec3 {
    let o = CORNERS[c];
    Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
}

/// Faces with corner order made counter-clockwise seen from outside.
fn oriented_faces() -> [[usize; 4]; 6] {
    FACES.map(|(corners, n)| {
        let normal = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        let p: Vec<Vec3> = corners.iter().map(|&c| corner_pos(c)).collect();
        let turn = (p[1] - p[0]).cross(&(p[2] - p[1]));
        if turn.dot(&normal) > 0.0 {
            corners
        } else {
            [corners[0], corners[3], corners[2], corners[1]]
        }
    })
}

fn contour_loops(case: usize, faces: &[[usize; 4]; 6]) -> Vec<Vec<usize>> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for face in faces {
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if !(inside(a) && !inside(b)) {
                continue;
            }
            // exit crossing on (a, b); walk back to the entry of this inside run
            let exit = edge_between(a, b);
            let mut j = (k + 3) % 4;
            loop {
                let (p, q) = (face[j], face[(j + 1) % 4]);
                if !inside(p) && inside(q) {
                    next[exit] = edge_between(p, q);
                    break;
                }
                j = (j + 3) % 4;
            }
        }
    }
    let mut visited = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            lp.push(e);
            e = next[e];
        }
        loops.push(lp);
    }
    loops
}

fn build_table() -> [Vec<Vec<u8>>; 256] {
    let faces = oriented_faces();

    // Global winding from the single-corner case: normals must point away
    // from the inside corner.
    let mid = |e: usize| (corner_pos(EDGES[e][0]) + corner_pos(EDGES[e][1])) / 2.0;
    let probe = &contour_loops(1, &faces)[0];
    let n = (mid(probe[1]) - mid(probe[0])).cross(&(mid(probe[2]) - mid(probe[0])));
    let flip = n.dot(&Vec3::new(1.0, 1.0, 1.0)) < 0.0;

    std::array::from_fn(|case| {
        contour_loops(case, &faces)
            .into_iter()
            .map(|lp| {
                let mut lp: Vec<u8> = lp.into_iter().map(|e| e as u8).collect();
                if flip {
                    lp.reverse();
                }
                lp
            })
            .collect()
    })
}

/// Extracts the `iso` level set as an outward-wound triangle mesh (normals
/// point toward lower values). Returns an empty mesh when no cell straddles
/// the level.
///
/// Loops of three crossings become one triangle; longer loops are fanned
/// around an added centre vertex, so every mesh edge between two grid-edge
/// vertices is a face segment shared by exactly two cells.
pub fn marching_cubes(volume: &LabelVolume, iso: f64) -> TriMesh {
    let table = loop_table();
    let [nx, ny, nz] = volume.dims;
    let mut mesh = TriMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let value = |x: usize, y: usize, z: usize| volume.values[x + nx * (y + ny * z)] as f64;
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();

    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, o) in CORNERS.iter().enumerate() {
                    vals[c] = value(x + o[0], y + o[1], z + o[2]);
                    if vals[c] > iso {
                        case |= 1 << c;
                    }
                }
                let loops = &table[case];
                if loops.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for lp in loops {
                    let idx: Vec<u32> = lp
                        .iter()
                        .map(|&e| {
                            let e = e as usize;
                            if local[e] == u32::MAX {
                                let [ca, cb] = EDGES[e];
                                let (oa, ob) = (CORNERS[ca], CORNERS[cb]);
                                // global id of the grid edge: lower endpoint + axis
                                let axis = (0..3).find(|&a| oa[a] != ob[a]).unwrap();
                                let lo = if oa[axis] < ob[axis] { oa } else { ob };
                                let key = (((z + lo[2]) * ny + (y + lo[1])) * nx + (x + lo[0])) * 3 + axis;
                                local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                    let (va, vb) = (vals[ca], vals[cb]);
                                    let t = ((iso - va) / (vb - va)).clamp(1e-6, 1.0 - 1e-6);
                                    let pa = Vec3::new((x + oa[0]) as f64, (y + oa[1]) as f64, (z + oa[2]) as f64);
                                    let pb = Vec3::new((x + ob[0]) as f64, (y + ob[1]) as f64, (z + ob[2]) as f64);
                                    let g = pa + (pb - pa) * t;
                                    mesh.vertices.push(volume.origin + g * volume.spacing);
                                    (mesh.vertices.len() - 1) as u32
                                });
                            }
                            local[e]
                        })
                        .collect();
                    if idx.len() == 3 {
                        mesh.faces.push([idx[0], idx[1], idx[2]]);
                        continue;
                    }
                    let center = idx
                        .iter()
                        .fold(Vec3::zeros(), |acc, &i| acc + mesh.vertices[i as usize])
                        / idx.len() as f64;
                    mesh.vertices.push(center);
                    let c = (mesh.vertices.len() - 1) as u32;
                    for k in 0..idx.len() {
                        mesh.faces.push([c, idx[k], idx[(k + 1) % idx.len()]]);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases_are_empty() {
        let t = loop_table();
        assert!(t[0].is_empty());
        assert!(t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        assert_eq!(t[1][0].len(), 3);
        assert_eq!(t[254][0].len(), 3);
    }

    /// In every case each crossed cube edge appears in exactly one loop, and
    /// consecutive loop entries share a cube face.
    #[test]
    fn loops_cover_crossings_along_faces() {
        let faces = oriented_faces();
        for (case, loops) in loop_table().iter().enumerate() {
            let mut seen = [0; 12];
            for lp in loops {
                for k in 0..lp.len() {
                    let (a, b) = (lp[k] as usize, lp[(k + 1) % lp.len()] as usize);
                    seen[a] += 1;
                    let share = faces.iter().any(|f| {
                        EDGES[a].iter().all(|c| f.contains(c)) && EDGES[b].iter().all(|c| f.contains(c))
                    });
                    assert!(share, "case {case}: {a}->{b} not on one face");
                }
            }
            for (e, ends) in EDGES.iter().enumerate() {
                let crossed = ((case >> ends[0]) & 1) != ((case >> ends[1]) & 1);
                assert_eq!(seen[e], crossed as i32, "case {case} edge {e}");
            }
        }
    }

    /// Adjacent cubes must produce the same segments on their shared face:
    /// the set of segments on a face depends only on its four corner signs,
    /// and the two cubes traverse it in opposite directions.
    #[test]
    fn shared_faces_agree_between_neighbours() {
        // face z=1 of the lower cube (corners 4..7) is face z=0 of the upper (0..3)
        let lower_to_upper = [(4, 0), (5, 1), (6, 2), (7, 3)];
        let edge_map = |e: usize| -> Option<usize> {
            let [a, b] = EDGES[e];
            let ma = lower_to_upper.iter().find(|m| m.0 == a)?.1;
            let mb = lower_to_upper.iter().find(|m| m.0 == b)?.1;
            Some(edge_between(ma, mb))
        };
        let top_face = [4usize, 5, 6, 7];
        let bottom_face = [0usize, 1, 2, 3];
        let segments_on = |case: usize, face: &[usize; 4]| {
            let mut segs = Vec::new();
            for lp in &loop_table()[case] {
                for k in 0..lp.len() {
                    let (a, b) = (lp[k] as usize, lp[(k + 1) % lp.len()] as usize);
                    if EDGES[a].iter().chain(&EDGES[b]).all(|c| face.contains(c)) {
                        segs.push((a, b));
                    }
                }
            }
            segs
        };
        for lower in 0..256usize {
            let face_bits = (lower >> 4) & 0xF;
            for upper_rest in 0..16usize {
                let upper = face_bits | (upper_rest << 4);
                let mut a: Vec<(usize, usize)> = segments_on(lower, &top_face)
                    .into_iter()
                    .map(|(x, y)| (edge_map(y).unwrap(), edge_map(x).unwrap()))
                    .collect();
                let mut b = segments_on(upper, &bottom_face);
                a.sort_unstable();
                b.sort_unstable();
                assert_eq!(a, b, "lower {lower} upper {upper}");
            }
        }
    }
}
