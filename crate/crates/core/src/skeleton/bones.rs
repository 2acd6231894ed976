use super::{SkeletonClip, SkeletonGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Appends bone vectors `joint - parent(joint)` to a 3-channel clip, giving 6 channels.
pub fn compute_bones(clip: &SkeletonClip, graph: &SkeletonGraph) -> Result<SkeletonClip> {
    if clip.channels() != 3 {
        return Err(Error::shape("compute_bones", "3 channels", clip.channels()));
    }
    if clip.joints() != graph.num_joints() {
        return Err(Error::shape("compute_bones", graph.num_joints(), clip.joints()));
    }
    let parents = graph
        .parents()
        .ok_or_else(|| Error::invalid("compute_bones", "graph has no parent map"))?;
    let [_, t, v, m]: [usize; 4] = clip.data.shape().try_into().unwrap();
    let data = Tensor::from_fn(vec![6, t, v, m], |i| {
        let (c, f, j, b) = (i[0], i[1], i[2], i[3]);
        if c < 3 {
            clip.at(c, f, j, b)
        } else {
            clip.at(c - 3, f, j, b) - clip.at(c - 3, f, parents[j], b)
        }
    });
    SkeletonClip::new(data, clip.label, clip.valid_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::normalize_adjacency;

    fn clip_from(coords: &[[f64; 3]]) -> SkeletonClip {
        let v = coords.len();
        let data = Tensor::from_fn(vec![3, 1, v, 1], |i| coords[i[2]][i[0]]);
        SkeletonClip::new(data, 0, 1).unwrap()
    }

    #[test]
    fn bone_is_child_minus_parent() {
        let g = normalize_adjacency(2, &[(0, 1)], 0).unwrap();
        let out = compute_bones(&clip_from(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), &g).unwrap();
        assert_eq!(out.channels(), 6);
        assert_eq!([out.at(3, 0, 1, 0), out.at(4, 0, 1, 0), out.at(5, 0, 1, 0)], [1.0, 2.0, 3.0]);
        // the center is its own parent
        assert_eq!([out.at(3, 0, 0, 0), out.at(4, 0, 0, 0), out.at(5, 0, 0, 0)], [0.0; 3]);
    }

    #[test]
    fn translation_leaves_bones_unchanged() {
        let g = SkeletonGraph::chain(4).unwrap();
        let base = [[0.1, 0.2, 0.3], [0.5, -0.1, 0.0], [1.0, 1.0, 1.0], [-2.0, 0.5, 0.25]];
        let moved: Vec<[f64; 3]> = base.iter().map(|p| [p[0] + 3.0, p[1] - 1.0, p[2] + 0.5]).collect();
        let (a, b) = (
            compute_bones(&clip_from(&base), &g).unwrap(),
            compute_bones(&clip_from(&moved), &g).unwrap(),
        );
        for c in 3..6 {
            for v in 0..4 {
                assert!((a.at(c, 0, v, 0) - b.at(c, 0, v, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_graph_without_parents() {
        let g = SkeletonGraph::from_partitions(vec![Tensor::eye(2)]).unwrap();
        assert!(compute_bones(&clip_from(&[[0.0; 3], [1.0; 3]]), &g).is_err());
    }
}
