use std::path::PathBuf;

use proptest::prelude::*;
use sttr_core::skeleton::{parse_ntu_file, parse_ntu_name, parse_ntu_skeleton, preprocess_clip, PreprocessOptions, RawSequence};
use sttr_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ntu").join(name)
}

fn opts(frames: usize) -> PreprocessOptions {
    PreprocessOptions {
        target_frames: frames,
        max_bodies: 2,
        align_axes: false,
    }
}

/// Coordinates the fixture generator wrote for body `b`, frame `t`, joint `j`.
fn written(b: usize, t: usize, j: usize) -> [f64; 3] {
    let (bf, tf, jf) = (b as f64, t as f64, j as f64);
    [
        0.1 * jf + 0.01 * tf + bf,
        0.2 + 0.05 * jf + if b == 0 { 0.02 * tf } else { 0.0 },
        3.0 + 0.001 * jf * tf,
    ]
}

fn parse_line(path: &str) -> usize {
    match parse_ntu_file(&fixture(path)) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("{path}: expected parse error, got {other:?}"),
    }
}

#[test]
fn two_body_file_parses_every_joint() {
    let seq = parse_ntu_file(&fixture("S001C002P003R001A005.skeleton")).unwrap();
    assert_eq!(seq.frames.len(), 3);
    for (t, frame) in seq.frames.iter().enumerate() {
        assert_eq!(frame.bodies.len(), 2);
        for (b, body) in frame.bodies.iter().enumerate() {
            assert_eq!(body.id, format!("7200{b}"));
            assert_eq!(body.joints.len(), 25);
            for (j, p) in body.joints.iter().enumerate() {
                let w = written(b, t, j);
                for a in 0..3 {
                    assert!((p[a] - w[a]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn two_body_file_preprocesses_to_centered_loop_padded_clip() {
    let seq = parse_ntu_file(&fixture("S001C002P003R001A005.skeleton")).unwrap();
    let label = parse_ntu_name("S001C002P003R001A005.skeleton").unwrap().action as usize;
    assert_eq!(label, 4);
    let clip = preprocess_clip(&seq, label, &opts(5)).unwrap();
    assert_eq!(clip.data.shape(), &[3, 5, 25, 2]);
    assert_eq!(clip.valid_frames, 3);
    assert_eq!(clip.label, 4);
    let origin = written(0, 0, 1);
    assert_eq!(origin, [0.1, 0.25, 3.0]);
    for t in 0..5 {
        for v in 0..25 {
            for b in 0..2 {
                let w = written(b, t % 3, v);
                for c in 0..3 {
                    assert!((clip.at(c, t, v, b) - (w[c] - origin[c])).abs() < 1e-12, "c{c} t{t} v{v} b{b}");
                }
            }
        }
    }
}

#[test]
fn single_frame_file_repeats_its_frame() {
    let seq = parse_ntu_file(&fixture("S002C001P004R002A002.skeleton")).unwrap();
    assert_eq!(seq.frames.len(), 1);
    let clip = preprocess_clip(&seq, 1, &opts(4)).unwrap();
    assert_eq!(clip.valid_frames, 1);
    for t in 1..4 {
        for v in 0..25 {
            for c in 0..3 {
                assert_eq!(clip.at(c, t, v, 0), clip.at(c, 0, v, 0));
                // the second body slot stays empty
                assert_eq!(clip.at(c, t, v, 1), 0.0);
            }
        }
    }
    assert_eq!(clip.at(0, 0, 1, 0), 0.0);
}

#[test]
fn empty_body_frame_is_dropped_before_padding() {
    let seq = parse_ntu_file(&fixture("S003C003P005R001A003.skeleton")).unwrap();
    assert_eq!(seq.frames.len(), 3);
    assert_eq!(seq.nonempty_frames(), 2);
    assert!(seq.frames[1].bodies.is_empty());
    let clip = preprocess_clip(&seq, 2, &opts(5)).unwrap();
    assert_eq!(clip.valid_frames, 2);
    let order = [0, 2, 0, 2, 0];
    let origin = seq.frames[0].bodies[0].joints[1];
    for (t, &src) in order.iter().enumerate() {
        for v in 0..25 {
            let p = seq.frames[src].bodies[0].joints[v];
            for c in 0..3 {
                assert!((clip.at(c, t, v, 0) - (p[c] - origin[c])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn file_without_bodies_parses_but_cannot_be_preprocessed() {
    let seq = parse_ntu_file(&fixture("all_empty.skeleton")).unwrap();
    assert_eq!(seq.frames.len(), 2);
    assert_eq!(seq.nonempty_frames(), 0);
    let err = preprocess_clip(&seq, 0, &opts(4)).unwrap_err();
    assert_eq!(err.kind(), "invalid-argument");
}

#[test]
fn malformed_files_report_the_offending_line() {
    assert_eq!(parse_line("truncated.skeleton"), 58);
    assert_eq!(parse_line("bad_joint_count.skeleton"), 4);
    assert_eq!(parse_line("bad_metadata.skeleton"), 3);
    assert_eq!(parse_line("non_numeric.skeleton"), 6);
}

#[test]
fn truncated_file_mentions_end_of_file() {
    let err = parse_ntu_file(&fixture("truncated.skeleton")).unwrap_err();
    assert!(err.to_string().contains("end of file"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = parse_ntu_file(&fixture("nope.skeleton")).unwrap_err();
    assert_eq!(err.kind(), "io");
}

#[test]
fn fixture_names_decode() {
    let n = parse_ntu_name("S003C003P005R001A003.skeleton").unwrap();
    assert_eq!((n.setup, n.camera, n.subject, n.replication, n.action), (3, 3, 5, 1, 2));
    assert!(parse_ntu_name("truncated.skeleton").is_none());
}

#[test]
fn ingestion_is_deterministic_and_finite() {
    for name in [
        "S001C002P003R001A005.skeleton",
        "S002C001P004R002A002.skeleton",
        "S003C003P005R001A003.skeleton",
    ] {
        for align in [false, true] {
            let o = PreprocessOptions {
                align_axes: align,
                ..opts(16)
            };
            let a = preprocess_clip(&parse_ntu_file(&fixture(name)).unwrap(), 0, &o).unwrap();
            let b = preprocess_clip(&parse_ntu_file(&fixture(name)).unwrap(), 0, &o).unwrap();
            assert!(a.data.all_finite(), "{name} align={align}");
            assert_eq!(a.data.data(), b.data.data());
        }
    }
}

fn sequence_text(frames: &[Vec<Vec<[f64; 3]>>]) -> String {
    let mut s = format!("{}\n", frames.len());
    for bodies in frames {
        s.push_str(&format!("{}\n", bodies.len()));
        for (b, joints) in bodies.iter().enumerate() {
            s.push_str(&format!("{b} 0 0 0 0 0 0 0 0 2\n25\n"));
            for p in joints {
                s.push_str(&format!("{} {} {} 0 0 0 0 0 0 0 0 2\n", p[0], p[1], p[2]));
            }
        }
    }
    s
}

fn arb_frames() -> impl Strategy<Value = Vec<Vec<Vec<[f64; 3]>>>> {
    let joint = prop::array::uniform3(-5.0f64..5.0);
    let body = prop::collection::vec(joint, 25);
    let frame = prop::collection::vec(body, 0..3);
    prop::collection::vec(frame, 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn parse_then_preprocess_is_deterministic_and_nan_free(frames in arb_frames(), target in 1usize..12, align in any::<bool>()) {
        let text = sequence_text(&frames);
        let a: RawSequence = parse_ntu_skeleton(text.as_bytes()).unwrap();
        let b: RawSequence = parse_ntu_skeleton(text.as_bytes()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.frames.len(), frames.len());
        let o = PreprocessOptions { target_frames: target, max_bodies: 2, align_axes: align };
        match (preprocess_clip(&a, 0, &o), preprocess_clip(&b, 0, &o)) {
            (Ok(x), Ok(y)) => {
                prop_assert!(x.data.all_finite());
                prop_assert_eq!(x.data.data(), y.data.data());
                prop_assert_eq!(x.valid_frames, a.nonempty_frames().min(target));
            }
            (Err(e), Err(_)) => {
                prop_assert_eq!(a.nonempty_frames(), 0);
                prop_assert_eq!(e.kind(), "invalid-argument");
            }
            _ => prop_assert!(false, "runs disagree"),
        }
    }
}
