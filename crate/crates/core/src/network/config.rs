use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{SkeletonGraph, NTU_JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    /// Spatial self-attention with temporal convolution.
    STr,
    /// Graph convolution with temporal self-attention.
    TTr,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::STr => "s-tr",
            Stream::TTr => "t-tr",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-tr" => Ok(Stream::STr),
            "t-tr" => Ok(Stream::TTr),
            _ => Err(Error::invalid("stream", format!("unknown stream {s:?}, expected s-tr or t-tr"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    Gcn,
    Ssa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Tcn,
    Tsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub spatial: SpatialKind,
    pub temporal: TemporalKind,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphSpec {
    Ntu,
    /// Path graph over `joints` joints, centered at the middle joint.
    Chain {
        joints: usize,
    },
}

impl GraphSpec {
    pub fn build(&self) -> Result<SkeletonGraph> {
        match self {
            GraphSpec::Ntu => Ok(SkeletonGraph::ntu()),
            GraphSpec::Chain { joints } => SkeletonGraph::chain(*joints),
        }
    }

    pub fn joints(&self) -> usize {
        match self {
            GraphSpec::Ntu => NTU_JOINTS,
            GraphSpec::Chain { joints } => *joints,
        }
    }
}

/// Number of leading layers that stay graph-conv + temporal-conv in both streams.
pub const PLAIN_LAYERS: usize = 3;

pub const STANDARD_WIDTHS: [usize; 9] = [64, 64, 64, 64, 128, 128, 128, 256, 256];
pub const STANDARD_STRIDES: [usize; 9] = [1, 1, 1, 1, 2, 1, 1, 2, 1];
/// First-layer width of the desk-scale network (standard widths divided by 8).
pub const DESK_BASE_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stream: Stream,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub use_bones: bool,
    pub graph: GraphSpec,
    pub temporal_kernel: usize,
    pub max_heads: usize,
    /// ReLU between the spatial and temporal sub-modules of each layer.
    pub branch_relu: bool,
    /// Batch norm over every (joint, channel) pair of the raw input.
    #[serde(default = "enabled")]
    pub input_norm: bool,
}

fn enabled() -> bool {
    true
}

impl NetworkConfig {
    /// Builds the layer plan for `widths` (joints-only); bones double every width.
    pub fn plan(stream: Stream, widths: &[usize], strides: &[usize], num_classes: usize, use_bones: bool, graph: GraphSpec) -> Result<Self> {
        if widths.len() != strides.len() {
            return Err(Error::shape("NetworkConfig::plan", widths.len(), strides.len()));
        }
        let mult = if use_bones { 2 } else { 1 };
        let input_channels = 3 * mult;
        let mut c_in = input_channels;
        let layers = widths
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&w, &stride))| {
                let (spatial, temporal) = match (i < PLAIN_LAYERS, stream) {
                    (true, _) => (SpatialKind::Gcn, TemporalKind::Tcn),
                    (false, Stream::STr) => (SpatialKind::Ssa, TemporalKind::Tcn),
                    (false, Stream::TTr) => (SpatialKind::Gcn, TemporalKind::Tsa),
                };
                let spec = LayerSpec {
                    c_in,
                    c_out: w * mult,
                    spatial,
                    temporal,
                    stride,
                };
                c_in = w * mult;
                spec
            })
            .collect();
        let cfg = NetworkConfig {
            stream,
            layers,
            num_classes,
            input_channels,
            use_bones,
            graph,
            temporal_kernel: 9,
            max_heads: 8,
            branch_relu: true,
            input_norm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Nine layers, 64 to 256 channels, on the 25-joint graph.
    pub fn standard(stream: Stream, num_classes: usize, use_bones: bool) -> Result<Self> {
        Self::plan(stream, &STANDARD_WIDTHS, &STANDARD_STRIDES, num_classes, use_bones, GraphSpec::Ntu)
    }

    /// The standard plan with every width scaled to `base / 64`.
    pub fn desk(stream: Stream, num_classes: usize, use_bones: bool, base: usize) -> Result<Self> {
        let widths: Vec<usize> = STANDARD_WIDTHS.iter().map(|w| (w * base / 64).max(1)).collect();
        Self::plan(stream, &widths, &STANDARD_STRIDES, num_classes, use_bones, GraphSpec::Ntu)
    }

    /// Four layers on a 5-joint chain, small enough for exhaustive gradient checks.
    pub fn tiny(stream: Stream, num_classes: usize) -> Result<Self> {
        Self::plan(stream, &[4, 4, 4, 8], &[1, 1, 1, 2], num_classes, false, GraphSpec::Chain { joints: 5 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("NetworkConfig", msg));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return bad(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.max_heads == 0 {
            return bad("max_heads must be positive".into());
        }
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in != c {
                return bad(format!("layer {i} expects {} input channels but receives {c}", l.c_in));
            }
            if l.c_out == 0 || !(1..=2).contains(&l.stride) {
                return bad(format!("layer {i}: c_out {} stride {}", l.c_out, l.stride));
            }
            let allowed = match (l.spatial, l.temporal) {
                (SpatialKind::Gcn, TemporalKind::Tcn) => true,
                (SpatialKind::Ssa, TemporalKind::Tcn) => self.stream == Stream::STr,
                (SpatialKind::Gcn, TemporalKind::Tsa) => self.stream == Stream::TTr,
                (SpatialKind::Ssa, TemporalKind::Tsa) => false,
            };
            if !allowed {
                return bad(format!(
                    "layer {i}: {:?}+{:?} not allowed in the {} stream",
                    l.spatial,
                    l.temporal,
                    self.stream.name()
                ));
            }
            c = l.c_out;
        }
        Ok(())
    }

    /// Total temporal downsampling factor.
    pub fn time_reduction(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_plan_shape() {
        let c = NetworkConfig::standard(Stream::STr, 60, false).unwrap();
        let widths: Vec<usize> = c.layers.iter().map(|l| l.c_out).collect();
        assert_eq!(widths, STANDARD_WIDTHS);
        assert_eq!(c.layers[0].c_in, 3);
        assert!(c.layers[..3]
            .iter()
            .all(|l| l.spatial == SpatialKind::Gcn && l.temporal == TemporalKind::Tcn));
        assert!(c.layers[3..]
            .iter()
            .all(|l| l.spatial == SpatialKind::Ssa && l.temporal == TemporalKind::Tcn));
        let t = NetworkConfig::standard(Stream::TTr, 60, false).unwrap();
        assert!(t.layers[3..]
            .iter()
            .all(|l| l.spatial == SpatialKind::Gcn && l.temporal == TemporalKind::Tsa));
        assert_eq!(c.time_reduction(), 4);
    }

    #[test]
    fn bones_double_every_width() {
        let j = NetworkConfig::standard(Stream::TTr, 60, false).unwrap();
        let b = NetworkConfig::standard(Stream::TTr, 60, true).unwrap();
        assert_eq!(b.input_channels, 6);
        for (x, y) in j.layers.iter().zip(&b.layers) {
            assert_eq!((2 * x.c_in, 2 * x.c_out), (y.c_in, y.c_out));
        }
    }

    #[test]
    fn validate_catches_channel_breaks() {
        let mut c = NetworkConfig::tiny(Stream::STr, 3).unwrap();
        c.layers[2].c_in = 5;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(Stream::STr, 3).unwrap();
        c.layers[3].temporal = TemporalKind::Tsa;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = NetworkConfig::desk(Stream::TTr, 4, true, 8).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), c);
    }
}
