use sttr_core::network::{count_params, unit_param_table, NetworkConfig, Stream};
use sttr_core::training::{lr_at_epoch, TrainConfig};

#[test]
fn default_schedule_steps_down_by_ten() {
    let cfg = TrainConfig::default();
    let expect = |e: usize, lr: f64| assert!((lr_at_epoch(e, &cfg) - lr).abs() < 1e-15, "epoch {e}");
    expect(0, 0.1);
    expect(59, 0.1);
    expect(60, 0.01);
    expect(89, 0.01);
    expect(90, 0.001);
    expect(119, 0.001);
}

#[test]
fn unit_counts_at_256_channels() {
    let t = unit_param_table(256, 9, 8).unwrap();
    let tcn = t.row("TCN").unwrap();
    assert_eq!(tcn.weights, 9 * 256 * 256);
    assert_eq!(tcn.weights, 589_824);
    let gcn = t.row("GCN").unwrap().total() as f64;
    let ssa = t.row("SSA").unwrap().total() as f64;
    let tsa = t.row("TSA").unwrap().total() as f64;
    assert!((gcn - 199_000.0).abs() / 199_000.0 < 0.02, "gcn {gcn}");
    assert!((ssa - 178_000.0).abs() / 178_000.0 < 0.15, "ssa {ssa}");
    assert!((tsa - 177_000.0).abs() / 177_000.0 < 0.15, "tsa {tsa}");
    assert!(ssa < gcn);
    assert!(tsa < tcn.total() as f64);
}

#[test]
fn attention_weights_follow_width_rule() {
    // q, k: C x C/4; v: C x C; o: C x C
    let t = unit_param_table(256, 9, 8).unwrap();
    assert_eq!(t.row("TSA").unwrap().weights, 2 * 256 * 64 + 2 * 256 * 256);
}

#[test]
fn bones_double_every_width() {
    for stream in [Stream::STr, Stream::TTr] {
        let j = NetworkConfig::desk(stream, 4, false, 8).unwrap();
        let b = NetworkConfig::desk(stream, 4, true, 8).unwrap();
        assert_eq!(b.input_channels, 6);
        for (lj, lb) in j.layers.iter().zip(&b.layers) {
            assert_eq!(lb.c_out, 2 * lj.c_out);
        }
        assert!(count_params(&b).unwrap().total() > count_params(&j).unwrap().total());
    }
}
