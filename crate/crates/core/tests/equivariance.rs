mod common;

use common::{gcn_equivariance_gap, ssa_equivariance_gap, tsa_equivariance_gap};
use proptest::prelude::*;
use sttr_core::skeleton::SkeletonGraph;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_attention_commutes_with_joint_permutation(seed in any::<u64>(), v in 2usize..8, t in 1usize..4) {
        prop_assert!(ssa_equivariance_gap(seed, t, v) < 1e-6);
    }

    #[test]
    fn temporal_attention_commutes_with_frame_permutation(seed in any::<u64>(), t in 2usize..9, v in 1usize..4) {
        prop_assert!(tsa_equivariance_gap(seed, t, v) < 1e-6);
    }

    #[test]
    fn graph_convolution_commutes_with_relabeling(seed in any::<u64>(), joints in 3usize..9) {
        prop_assert!(gcn_equivariance_gap(seed, &SkeletonGraph::chain(joints).unwrap()) < 1e-6);
    }

    #[test]
    fn graph_convolution_on_ntu_commutes_with_relabeling(seed in any::<u64>()) {
        prop_assert!(gcn_equivariance_gap(seed, &SkeletonGraph::ntu()) < 1e-6);
    }
}
