//! Reader for NTU RGB+D `.skeleton` text files.
//!
//! Layout: a frame count line, then per frame a body count line and per body
//! one metadata line (10 values), a joint count line (25), and 25 joint lines
//! of 12 values whose first three are x, y, z in meters.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::NTU_JOINTS;
use crate::error::{Error, Result};

const BODY_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct RawBody {
    /// First metadata field; used to follow a body across frames.
    pub id: String,
    pub joints: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawFrame {
    pub bodies: Vec<RawBody>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSequence {
    pub frames: Vec<RawFrame>,
}

impl RawSequence {
    pub fn nonempty_frames(&self) -> usize {
        self.frames.iter().filter(|f| !f.bodies.is_empty()).count()
    }
}

struct Lines<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    /// Next non-blank line split into tokens; errors at end of input.
    fn next_tokens(&mut self, expecting: &str) -> Result<Vec<String>> {
        loop {
            self.buf.clear();
            let n = self.inner.read_line(&mut self.buf).map_err(|e| Error::Parse {
                line: self.line_no + 1,
                msg: e.to_string(),
            })?;
            if n == 0 {
                return Err(Error::Parse {
                    line: self.line_no + 1,
                    msg: format!("unexpected end of file, expected {expecting}"),
                });
            }
            self.line_no += 1;
            let tokens: Vec<String> = self.buf.split_whitespace().map(str::to_owned).collect();
            if !tokens.is_empty() {
                return Ok(tokens);
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let tokens = self.next_tokens(what)?;
        if tokens.len() != 1 {
            return Err(self.err(format!("expected a single {what}, found {} values", tokens.len())));
        }
        tokens[0]
            .parse()
            .map_err(|_| self.err(format!("{what} {:?} is not a nonnegative integer", tokens[0])))
    }

    fn err(&self, msg: String) -> Error {
        Error::Parse { line: self.line_no, msg }
    }
}

pub fn parse_ntu_skeleton<R: BufRead>(reader: R) -> Result<RawSequence> {
    let mut lines = Lines {
        inner: reader,
        line_no: 0,
        buf: String::new(),
    };
    let frame_count = lines.count("frame count")?;
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let body_count = lines.count("body count")?;
        let mut bodies = Vec::with_capacity(body_count);
        for _ in 0..body_count {
            let meta = lines.next_tokens("body metadata")?;
            if meta.len() != BODY_FIELDS {
                return Err(lines.err(format!("body metadata has {} values, expected {BODY_FIELDS}", meta.len())));
            }
            let joint_count = lines.count("joint count")?;
            if joint_count != NTU_JOINTS {
                return Err(lines.err(format!("joint count {joint_count}, expected {NTU_JOINTS}")));
            }
            let mut joints = Vec::with_capacity(NTU_JOINTS);
            for _ in 0..NTU_JOINTS {
                let tokens = lines.next_tokens("joint line")?;
                if tokens.len() != JOINT_FIELDS {
                    return Err(lines.err(format!("joint line has {} values, expected {JOINT_FIELDS}", tokens.len())));
                }
                let mut values = [0.0f64; JOINT_FIELDS];
                for (v, tok) in values.iter_mut().zip(&tokens) {
                    *v = tok
                        .parse()
                        .ok()
                        .filter(|x: &f64| x.is_finite())
                        .ok_or_else(|| lines.err(format!("non-numeric value {tok:?}")))?;
                }
                joints.push([values[0], values[1], values[2]]);
            }
            bodies.push(RawBody { id: meta[0].clone(), joints });
        }
        frames.push(RawFrame { bodies });
    }
    Ok(RawSequence { frames })
}

pub fn parse_ntu_file(path: &Path) -> Result<RawSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ntu_skeleton(BufReader::new(file))
}

/// Fields encoded in an NTU sample name such as `S001C002P003R002A013`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NtuName {
    pub setup: u32,
    pub camera: u32,
    pub subject: u32,
    pub replication: u32,
    /// Zero-based action class.
    pub action: u32,
}

pub fn parse_ntu_name(name: &str) -> Option<NtuName> {
    let stem = name.split('.').next()?;
    let field = |tag: char| -> Option<u32> {
        let start = stem.find(tag)? + 1;
        let digits: String = stem[start..].chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    };
    Some(NtuName {
        setup: field('S')?,
        camera: field('C')?,
        subject: field('P')?,
        replication: field('R')?,
        action: field('A')?.checked_sub(1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_name_fields() {
        let n = parse_ntu_name("S001C002P003R002A013.skeleton").unwrap();
        assert_eq!(
            n,
            NtuName {
                setup: 1,
                camera: 2,
                subject: 3,
                replication: 2,
                action: 12
            }
        );
        assert!(parse_ntu_name("clip.skeleton").is_none());
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_ntu_skeleton("".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn zero_frames_parse_to_empty_sequence() {
        let seq = parse_ntu_skeleton("0\n".as_bytes()).unwrap();
        assert!(seq.frames.is_empty());
    }
}
