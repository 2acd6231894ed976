mod common;

use common::{attention_oracle_gap, rand_tensor, rng, run_attention, AttnWeights};

#[test]
fn spatial_attention_matches_loops_on_20_instances() {
    let d = attention_oracle_gap(false);
    assert!(d < 1e-6, "max abs diff {d}");
}

#[test]
fn temporal_attention_matches_loops_on_20_instances() {
    let d = attention_oracle_gap(true);
    assert!(d < 1e-6, "max abs diff {d}");
}

#[test]
fn single_node_sequences_reduce_to_value_output_maps() {
    // softmax over one key is 1, so the output is x · W_v · W_o
    let mut r = rng(5);
    let x = rand_tensor(&[1, 3, 1, 4], &mut r);
    let w = AttnWeights::random(4, 8, 8, &mut r);
    let got = run_attention(&x, &w, false);
    for t in 0..3 {
        for o in 0..8 {
            let want: f64 = (0..8)
                .map(|i| (0..4).map(|c| x.at(&[0, t, 0, c]) * w.wv.at(&[c, i])).sum::<f64>() * w.wo.at(&[i, o]))
                .sum();
            assert!((got.at(&[0, t, 0, o]) - want).abs() < 1e-12);
        }
    }
}
