use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerSpec, NetworkConfig, SpatialKind, TemporalKind};
use crate::attention::{AttentionAxis, AttentionWidths, SelfAttention};
use crate::autodiff::{Tape, Var};
use crate::conv::{GcnUnit, TcnUnit};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bound, Ctx, Linear, ParamStore};
use crate::skeleton::SkeletonGraph;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum SpatialUnit {
    Gcn(GcnUnit),
    Ssa(SelfAttention),
}

#[derive(Clone, Debug)]
pub enum TemporalUnit {
    Tcn(TcnUnit),
    /// Frames are subsampled by `stride` before attention.
    Tsa {
        attn: SelfAttention,
        stride: usize,
    },
}

/// `y = temporal(act(spatial(BN(x)))) + skip(x)`, where `act` is ReLU or identity.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub norm: BatchNorm,
    pub spatial: SpatialUnit,
    pub temporal: TemporalUnit,
    /// `None` is the identity; otherwise a strided 1×1 map with bias.
    pub skip: Option<Linear>,
    pub branch_relu: bool,
}

impl Layer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: LayerSpec,
        cfg: &NetworkConfig,
        graph: &SkeletonGraph,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm = BatchNorm::new(store, &format!("{name}.norm"), spec.c_in);
        let widths = AttentionWidths::for_channels(spec.c_out, cfg.max_heads);
        let spatial = match spec.spatial {
            SpatialKind::Gcn => SpatialUnit::Gcn(GcnUnit::new(store, &format!("{name}.gcn"), graph, spec.c_in, spec.c_out, rng)),
            SpatialKind::Ssa => SpatialUnit::Ssa(SelfAttention::new(
                store,
                &format!("{name}.ssa"),
                spec.c_in,
                spec.c_out,
                widths,
                AttentionAxis::Spatial,
                rng,
            )),
        };
        let temporal = match spec.temporal {
            TemporalKind::Tcn => TemporalUnit::Tcn(TcnUnit::new(
                store,
                &format!("{name}.tcn"),
                spec.c_out,
                spec.c_out,
                cfg.temporal_kernel,
                spec.stride,
                rng,
            )?),
            TemporalKind::Tsa => TemporalUnit::Tsa {
                attn: SelfAttention::new(
                    store,
                    &format!("{name}.tsa"),
                    spec.c_out,
                    spec.c_out,
                    widths,
                    AttentionAxis::Temporal,
                    rng,
                ),
                stride: spec.stride,
            },
        };
        let skip =
            (spec.c_in != spec.c_out || spec.stride != 1).then(|| Linear::new(store, &format!("{name}.skip"), spec.c_in, spec.c_out, true, rng));
        Ok(Layer {
            spec,
            norm,
            spatial,
            temporal,
            skip,
            branch_relu: cfg.branch_relu,
        })
    }

    /// `x[N, T, V, C_in]` to `[N, T', V, C_out]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let h = self.norm.forward(tape, p, x, ctx)?;
        let h = match &self.spatial {
            SpatialUnit::Gcn(g) => g.forward(tape, p, h)?,
            SpatialUnit::Ssa(a) => a.forward(tape, p, h, ctx)?,
        };
        let h = if self.branch_relu { tape.relu(h)? } else { h };
        let h = match &self.temporal {
            TemporalUnit::Tcn(t) => t.forward(tape, p, h)?,
            TemporalUnit::Tsa { attn, stride } => {
                let h = if *stride > 1 { tape.time_subsample(h, *stride)? } else { h };
                attn.forward(tape, p, h, ctx)?
            }
        };
        let s = match &self.skip {
            None => x,
            Some(lin) => {
                let xs = if self.spec.stride > 1 {
                    tape.time_subsample(x, self.spec.stride)?
                } else {
                    x
                };
                lin.forward(tape, p, xs)?
            }
        };
        let (hs, ss) = (tape.shape(h).to_vec(), tape.shape(s).to_vec());
        if hs != ss {
            return Err(Error::shape("layer residual", ss, hs));
        }
        tape.add(h, s)
    }
}

/// Per-module parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub module: String,
    pub kind: &'static str,
    pub weights: usize,
    pub biases: usize,
    pub norm: usize,
    pub importance: usize,
}

impl ParamRow {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norm + self.importance
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.rows.iter().map(ParamRow::total).sum()
    }

    pub fn row(&self, kind: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<14} {:<5} {:>10} {:>8} {:>6} {:>10} {:>10}",
            "module", "kind", "weights", "biases", "norm", "importance", "total"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:<5} {:>10} {:>8} {:>6} {:>10} {:>10}",
                r.module,
                r.kind,
                r.weights,
                r.biases,
                r.norm,
                r.importance,
                r.total()
            )?;
        }
        write!(
            f,
            "{:<14} {:<5} {:>10} {:>8} {:>6} {:>10} {:>10}",
            "total",
            "",
            "",
            "",
            "",
            "",
            self.total()
        )
    }
}

fn spatial_row(module: String, layer: &Layer) -> ParamRow {
    let norm = layer.norm.num_params();
    match &layer.spatial {
        SpatialUnit::Gcn(g) => {
            let [w, m, b] = g.counts();
            ParamRow {
                module,
                kind: "GCN",
                weights: w,
                biases: b,
                norm,
                importance: m,
            }
        }
        SpatialUnit::Ssa(a) => ParamRow {
            module,
            kind: "SSA",
            weights: a.weight_counts().iter().sum(),
            biases: 0,
            norm,
            importance: 0,
        },
    }
}

fn temporal_row(module: String, layer: &Layer) -> ParamRow {
    match &layer.temporal {
        TemporalUnit::Tcn(t) => {
            let [w, b] = t.counts();
            ParamRow {
                module,
                kind: "TCN",
                weights: w,
                biases: b,
                norm: 0,
                importance: 0,
            }
        }
        TemporalUnit::Tsa { attn, .. } => ParamRow {
            module,
            kind: "TSA",
            weights: attn.weight_counts().iter().sum(),
            biases: 0,
            norm: 0,
            importance: 0,
        },
    }
}

/// A stream: stacked layers, global average pooling over frames and joints,
/// a linear classifier, and averaging of logits over bodies.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub graph: SkeletonGraph,
    pub input_norm: Option<BatchNorm>,
    pub layers: Vec<Layer>,
    pub fc: Linear,
}

impl Network {
    pub fn new<F: Scalar>(config: NetworkConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let graph = config.graph.build()?;
        Self::with_graph(config, graph, store, rng)
    }

    /// As [`Network::new`] with an explicit graph in place of `config.graph`.
    pub fn with_graph<F: Scalar>(config: NetworkConfig, graph: SkeletonGraph, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let input_norm = config
            .input_norm
            .then(|| BatchNorm::new(store, "input_norm", graph.num_joints() * config.input_channels));
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, &spec)| Layer::new(store, &format!("layer{}", i + 1), spec, &config, &graph, rng))
            .collect::<Result<Vec<_>>>()?;
        let last = config.layers.last().unwrap().c_out;
        let fc = Linear::new(store, "fc", last, config.num_classes, true, rng);
        Ok(Network {
            config,
            graph,
            input_norm,
            layers,
            fc,
        })
    }

    /// `x[N, C, T, V, M]` to logits `[N, num_classes]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("network_forward", "[N, C, T, V, M]", s));
        }
        let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
        if m == 0 {
            return Err(Error::invalid("network_forward", "clip has no bodies (M = 0)"));
        }
        if n == 0 || t == 0 {
            return Err(Error::invalid("network_forward", format!("empty batch or clip: {s:?}")));
        }
        if c != self.config.input_channels {
            return Err(Error::shape(
                "network_forward",
                format!("{} input channels", self.config.input_channels),
                c,
            ));
        }
        if v != self.graph.num_joints() {
            return Err(Error::shape("network_forward", format!("{} joints", self.graph.num_joints()), v));
        }
        let h = tape.permute(x, &[0, 4, 2, 3, 1])?;
        let mut h = tape.reshape(h, &[n * m, t, v, c])?;
        if let Some(bn) = &self.input_norm {
            // one channel per (joint, coordinate), so static pose offsets do not swamp motion
            let flat = tape.reshape(h, &[n * m, t, 1, v * c])?;
            let flat = bn.forward(tape, p, flat, ctx)?;
            h = tape.reshape(flat, &[n * m, t, v, c])?;
        }
        for layer in &self.layers {
            h = layer.forward(tape, p, h, ctx)?;
        }
        let hs = tape.shape(h).to_vec();
        let h = tape.reshape(h, &[hs[0], hs[1] * hs[2], hs[3]])?;
        let pooled = tape.mean_dim1(h)?;
        let logits = self.fc.forward(tape, p, pooled)?;
        let logits = tape.reshape(logits, &[n, m, self.config.num_classes])?;
        tape.mean_dim1(logits)
    }

    /// Itemized parameter counts, one row per sub-module.
    pub fn param_report(&self) -> ParamReport {
        let mut rows = Vec::new();
        if let Some(bn) = &self.input_norm {
            rows.push(ParamRow {
                module: "input".into(),
                kind: "BN",
                weights: 0,
                biases: 0,
                norm: bn.num_params(),
                importance: 0,
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            rows.push(spatial_row(name.clone(), layer));
            rows.push(temporal_row(name.clone(), layer));
            if let Some(skip) = &layer.skip {
                rows.push(ParamRow {
                    module: name,
                    kind: "skip",
                    weights: skip.c_in * skip.c_out,
                    biases: skip.c_out,
                    norm: 0,
                    importance: 0,
                });
            }
        }
        rows.push(ParamRow {
            module: "classifier".into(),
            kind: "FC",
            weights: self.fc.c_in * self.fc.c_out,
            biases: self.fc.c_out,
            norm: 0,
            importance: 0,
        });
        ParamReport { rows }
    }
}

/// Itemized counts of a network built from `config`.
pub fn count_params(config: &NetworkConfig) -> Result<ParamReport> {
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(net.param_report())
}

/// One unit of each kind at `channels` in and out on the 25-joint graph.
/// The pre-norm batch norm is counted with the spatial units.
pub fn unit_param_table(channels: usize, temporal_kernel: usize, max_heads: usize) -> Result<ParamReport> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = SkeletonGraph::ntu();
    let widths = AttentionWidths::for_channels(channels, max_heads);
    let norm = 2 * channels;
    let gcn = GcnUnit::new(&mut store, "gcn", &graph, channels, channels, &mut rng);
    let tcn = TcnUnit::new(&mut store, "tcn", channels, channels, temporal_kernel, 1, &mut rng)?;
    let attn_weights = crate::attention::weight_counts(channels, channels, widths).iter().sum();
    let [gw, gm, gb] = gcn.counts();
    let [tw, tb] = tcn.counts();
    let row = |kind, weights, biases, norm, importance| ParamRow {
        module: format!("C={channels}"),
        kind,
        weights,
        biases,
        norm,
        importance,
    };
    Ok(ParamReport {
        rows: vec![
            row("GCN", gw, gb, norm, gm),
            row("SSA", attn_weights, 0, norm, 0),
            row("TCN", tw, tb, 0, 0),
            row("TSA", attn_weights, 0, 0, 0),
        ],
    })
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub net: Network,
    pub store: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Model { net, store })
    }

    /// Eval-mode logits for a batch `[N, C, T, V, M]`.
    pub fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.net.forward(&mut tape, &p, xv, &mut Ctx::eval())?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{ssa_forward, tsa_forward};
    use crate::conv::{gcn_forward, tcn_forward, TcnVars};
    use crate::network::config::Stream;
    use crate::nn::Mode;
    use rand::Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn layer_fixture(stream: Stream, idx: usize) -> (ParamStore<f64>, Layer, SkeletonGraph) {
        let cfg = NetworkConfig::tiny(stream, 3).unwrap();
        let graph = cfg.graph.build().unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Layer::new(&mut store, "l", cfg.layers[idx], &cfg, &graph, &mut rng).unwrap();
        // move batch-norm affine parameters off their trivial values
        for p in store.params_mut() {
            if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.contains("importance") || p.name.ends_with("bias") {
                let n = p.value.numel();
                p.value = random(p.value.shape().to_vec(), n as u64).map(|v| 1.0 + 0.3 * v);
            }
        }
        (store, layer, graph)
    }

    /// Reference composition built from the functional units and plain tensor math.
    fn oracle(store: &ParamStore<f64>, layer: &Layer, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        // training-mode batch norm by hand
        let c = layer.spec.c_in;
        let rows = x.numel() / c;
        let (g, b) = (store.get(layer.norm.gamma), store.get(layer.norm.beta));
        let mut normed = x.clone();
        for ch in 0..c {
            let vals: Vec<f64> = (0..rows).map(|r| x.data()[r * c + ch]).collect();
            let mean = vals.iter().sum::<f64>() / rows as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            for r in 0..rows {
                normed.data_mut()[r * c + ch] = g.data()[ch] * (vals[r] - mean) / (var + 1e-5).sqrt() + b.data()[ch];
            }
        }
        let h = tape.constant(normed);
        let mut ctx = Ctx::eval();
        let h = match &layer.spatial {
            SpatialUnit::Gcn(u) => {
                let vars = u.vars(&mut tape, &p);
                gcn_forward(&mut tape, h, &vars).unwrap()
            }
            SpatialUnit::Ssa(a) => ssa_forward(&mut tape, h, &a.vars(&p, 0.0), &mut ctx).unwrap(),
        };
        let h = tape.value(h).map(|v| v.max(0.0));
        let h = tape.constant(h);
        let h = match &layer.temporal {
            TemporalUnit::Tcn(t) => tcn_forward(
                &mut tape,
                h,
                &TcnVars {
                    weight: p.var(t.weight),
                    bias: p.var(t.bias),
                    stride: t.stride,
                },
            )
            .unwrap(),
            TemporalUnit::Tsa { attn, stride } => {
                let h = tape.time_subsample(h, *stride).unwrap();
                tsa_forward(&mut tape, h, &attn.vars(&p, 0.0), &mut ctx).unwrap()
            }
        };
        let skip = match &layer.skip {
            None => x.clone(),
            Some(lin) => {
                let xs = tape.time_subsample(xv, layer.spec.stride).unwrap();
                let y = lin.forward(&mut tape, &p, xs).unwrap();
                tape.value(y).clone()
            }
        };
        let out = tape.value(h).clone();
        Tensor::new(out.shape().to_vec(), out.data().iter().zip(skip.data()).map(|(a, b)| a + b).collect()).unwrap()
    }

    #[test]
    fn layers_match_composition_oracle() {
        for stream in [Stream::STr, Stream::TTr] {
            for idx in [0, 3] {
                let (store, layer, _) = layer_fixture(stream, idx);
                let x = random(vec![2, 6, 5, layer.spec.c_in], 11 + idx as u64);
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let xv = tape.constant(x.clone());
                let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
                let y = layer.forward(&mut tape, &p, xv, &mut ctx).unwrap();
                let expect = oracle(&store, &layer, &x);
                assert_eq!(tape.shape(y), expect.shape());
                assert!(tape.value(y).max_abs_diff(&expect) < 1e-6, "{stream:?} layer {idx}");
            }
        }
    }

    #[test]
    fn zero_branch_leaves_skip() {
        for stream in [Stream::STr, Stream::TTr] {
            let (mut store, layer, _) = layer_fixture(stream, 3);
            let zero_ids: Vec<_> = match &layer.spatial {
                SpatialUnit::Ssa(a) => vec![a.w_o],
                SpatialUnit::Gcn(g) => g.weights.iter().copied().chain([g.bias]).collect(),
            };
            for id in zero_ids {
                *store.get_mut(id) = Tensor::zeros(store.get(id).shape().to_vec());
            }
            let temporal_bias = match &layer.temporal {
                TemporalUnit::Tcn(t) => Some(t.bias),
                TemporalUnit::Tsa { .. } => None,
            };
            if let Some(b) = temporal_bias {
                *store.get_mut(b) = Tensor::zeros(store.get(b).shape().to_vec());
            }
            let x = random(vec![1, 6, 5, layer.spec.c_in], 3);
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let xv = tape.constant(x);
            let y = layer.forward(&mut tape, &p, xv, &mut Ctx::eval()).unwrap();
            let lin = layer.skip.as_ref().unwrap();
            let xs = tape.time_subsample(xv, 2).unwrap();
            let s = lin.forward(&mut tape, &p, xs).unwrap();
            assert!(tape.value(y).max_abs_diff(tape.value(s)) < 1e-12);
            assert_eq!(tape.shape(y), &[1, 3, 5, 8]);
        }
    }

    #[test]
    fn network_output_shape_and_body_duplication() {
        let cfg = NetworkConfig::desk(Stream::STr, 4, false, 4).unwrap();
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let x = random(vec![2, 3, 16, 25, 2], 5);
        let y = model.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.all_finite());
        let dup = Tensor::from_fn(vec![2, 3, 16, 25, 2], |i| x.at(&[i[0], i[1], i[2], i[3], 0]));
        let single = Tensor::from_fn(vec![2, 3, 16, 25, 1], |i| x.at(&[i[0], i[1], i[2], i[3], 0]));
        let (a, b) = (model.logits(&dup).unwrap(), model.logits(&single).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_bodies_is_an_error() {
        let model = Model::<f64>::new(NetworkConfig::tiny(Stream::TTr, 3).unwrap(), 1).unwrap();
        assert!(model.logits(&Tensor::zeros(vec![1, 3, 6, 5, 0])).is_err());
        assert!(model.logits(&Tensor::zeros(vec![1, 6, 6, 5, 1])).is_err());
    }

    #[test]
    fn joint_permutation_leaves_str_logits_unchanged() {
        let cfg = NetworkConfig::desk(Stream::STr, 4, false, 4).unwrap();
        let graph = SkeletonGraph::ntu();
        let perm: Vec<usize> = (0..25).map(|i| (i * 7 + 3) % 25).collect();
        let mut s1 = ParamStore::<f64>::new();
        let n1 = Network::with_graph(cfg.clone(), graph.clone(), &mut s1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut s2 = ParamStore::<f64>::new();
        let n2 = Network::with_graph(cfg, graph.permuted(&perm).unwrap(), &mut s2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = random(vec![2, 3, 8, 25, 1], 9);
        let xp = Tensor::from_fn(vec![2, 3, 8, 25, 1], |i| x.at(&[i[0], i[1], i[2], perm[i[3]], i[4]]));
        let run = |net: &Network, store: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
            let y = net.forward(&mut tape, &p, xv, &mut ctx).unwrap();
            tape.value(y).clone()
        };
        assert!(run(&n1, &s1, &x).max_abs_diff(&run(&n2, &s2, &xp)) < 1e-5);
    }

    #[test]
    fn report_matches_store() {
        for stream in [Stream::STr, Stream::TTr] {
            let cfg = NetworkConfig::desk(stream, 4, true, 8).unwrap();
            let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(count_params(&cfg).unwrap().total(), model.store.num_scalars());
        }
    }

    #[test]
    fn unit_table_at_256() {
        let t = unit_param_table(256, 9, 8).unwrap();
        assert_eq!(t.row("TCN").unwrap().weights, 589_824);
        assert_eq!(t.row("GCN").unwrap().total(), 199_251);
        assert_eq!(t.row("SSA").unwrap().total(), 164_352);
        assert_eq!(t.row("TSA").unwrap().total(), 163_840);
    }
}
