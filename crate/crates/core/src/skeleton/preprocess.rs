//! Raw NTU sequences to fixed-size clips: body selection, centering, optional
//! axis alignment, and loop padding.

use super::{RawSequence, SkeletonClip, NTU_CENTER, NTU_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub target_frames: usize,
    pub max_bodies: usize,
    /// Rotate so the spine points along +z and the shoulders along +x.
    pub align_axes: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            target_frames: 300,
            max_bodies: 2,
            align_axes: false,
        }
    }
}

const SPINE_BASE: usize = 0;
const SPINE_MID: usize = 1;
const LEFT_SHOULDER: usize = 4;
const RIGHT_SHOULDER: usize = 8;

struct Track {
    id: String,
    /// frame index -> joints
    frames: Vec<Option<Vec<[f64; 3]>>>,
}

impl Track {
    /// Sum over joints and axes of the coordinate variance across the frames the body appears in.
    fn motion_energy(&self) -> f64 {
        let present: Vec<&Vec<[f64; 3]>> = self.frames.iter().flatten().collect();
        let n = present.len() as f64;
        if present.len() < 2 {
            return 0.0;
        }
        let mut energy = 0.0;
        for j in 0..NTU_JOINTS {
            for a in 0..3 {
                let mean = present.iter().map(|f| f[j][a]).sum::<f64>() / n;
                energy += present.iter().map(|f| (f[j][a] - mean).powi(2)).sum::<f64>() / n;
            }
        }
        energy
    }
}

pub fn preprocess_clip(seq: &RawSequence, label: usize, opts: &PreprocessOptions) -> Result<SkeletonClip> {
    if opts.target_frames == 0 || opts.max_bodies == 0 {
        return Err(Error::invalid("preprocess_clip", "target_frames and max_bodies must be positive"));
    }
    let total = seq.frames.len();
    let mut tracks: Vec<Track> = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        for body in &frame.bodies {
            let idx = match tracks.iter().position(|tr| tr.id == body.id) {
                Some(i) => i,
                None => {
                    tracks.push(Track {
                        id: body.id.clone(),
                        frames: vec![None; total],
                    });
                    tracks.len() - 1
                }
            };
            tracks[idx].frames[t] = Some(body.joints.clone());
        }
    }
    // stable sort keeps first-appearance order among equal energies
    let mut ranked: Vec<(f64, Track)> = tracks.into_iter().map(|tr| (tr.motion_energy(), tr)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    ranked.truncate(opts.max_bodies);
    let kept: Vec<Track> = ranked.into_iter().map(|(_, tr)| tr).collect();

    let valid: Vec<usize> = (0..total).filter(|&t| kept.iter().any(|tr| tr.frames[t].is_some())).collect();
    if valid.is_empty() {
        return Err(Error::invalid("preprocess_clip", "sequence has no frame with a body"));
    }
    let m = opts.max_bodies;
    let mut frames: Vec<Vec<Option<Vec<[f64; 3]>>>> = valid
        .iter()
        .map(|&t| (0..m).map(|b| kept.get(b).and_then(|tr| tr.frames[t].clone())).collect())
        .collect();

    let reference = frames
        .iter()
        .find_map(|f| f[0].as_ref())
        .or_else(|| frames.iter().flat_map(|f| f.iter().flatten()).next())
        .expect("at least one body in a valid frame")
        .clone();
    let origin = reference[NTU_CENTER];
    let rotation = if opts.align_axes { alignment(&reference) } else { IDENTITY };
    for frame in &mut frames {
        for joints in frame.iter_mut().flatten() {
            for p in joints.iter_mut() {
                let d = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
                *p = apply(&rotation, d);
            }
        }
    }

    let t_valid = frames.len().min(opts.target_frames);
    let data = Tensor::from_fn(vec![3, opts.target_frames, NTU_JOINTS, m], |i| {
        let (c, t, v, b) = (i[0], i[1], i[2], i[3]);
        match &frames[t % t_valid][b] {
            Some(joints) => joints[v][c],
            None => 0.0,
        }
    });
    SkeletonClip::new(data, label, t_valid)
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn apply(r: &Mat3, p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Rotation taking unit vector `a` onto unit vector `b` (Rodrigues).
fn rotation_between(a: [f64; 3], b: [f64; 3]) -> Mat3 {
    let axis = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let s = norm(axis);
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    if s < 1e-12 {
        if c > 0.0 {
            return IDENTITY;
        }
        // antiparallel: half turn about any axis orthogonal to a
        let ortho = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let k = [
            a[1] * ortho[2] - a[2] * ortho[1],
            a[2] * ortho[0] - a[0] * ortho[2],
            a[0] * ortho[1] - a[1] * ortho[0],
        ];
        let n = norm(k);
        let k = [k[0] / n, k[1] / n, k[2] / n];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = 2.0 * k[i] * k[j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        return r;
    }
    let k = [axis[0] / s, axis[1] / s, axis[2] / s];
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let kx2 = matmul3(&kx, &kx);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * kx[i][j] + (1.0 - c) * kx2[i][j];
        }
    }
    r
}

fn alignment(joints: &[[f64; 3]]) -> Mat3 {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let unit = |v: [f64; 3]| {
        let n = norm(v);
        (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
    };
    let Some(spine) = unit(sub(joints[SPINE_MID], joints[SPINE_BASE])) else {
        return IDENTITY;
    };
    let r1 = rotation_between(spine, [0.0, 0.0, 1.0]);
    let shoulders = apply(&r1, sub(joints[LEFT_SHOULDER], joints[RIGHT_SHOULDER]));
    // rotate about z only, so the spine stays on the z axis
    let Some(flat) = unit([shoulders[0], shoulders[1], 0.0]) else {
        return r1;
    };
    let r2 = rotation_between(flat, [1.0, 0.0, 0.0]);
    matmul3(&r2, &r1)
}
