//! Detection network: five-stage CSP down-sampling backbone, an SPP bridge
//! on the deepest map, progressive bilinear-upsample fusion back to a single
//! stride-2 feature map, and twin prediction heads (confidence + box
//! distances).

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{kaiming_conv, AggregationConfig, AggregationParams};
use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamId, ParamStore, Tape};
use crate::scalar::Real;

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub n_frames: usize,
    /// Internal width of the aggregation module (output is always 3n+1).
    pub c_agg: usize,
    pub width_multiplier: f64,
    pub depth_multiplier: f64,
    pub base_widths: [usize; 5],
    pub base_depths: [usize; 5],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetworkConfig {
    pub fn new(n_frames: usize) -> Self {
        NetworkConfig {
            n_frames,
            c_agg: 3 * n_frames + 1,
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            base_widths: [64, 128, 256, 512, 1024],
            base_depths: [1, 2, 8, 8, 4],
            bn_eps: 1e-5,
            bn_momentum: 0.03,
        }
    }

    /// Desk-scale configuration for gradient checks and synthetic training.
    pub fn tiny(n_frames: usize) -> Self {
        NetworkConfig {
            width_multiplier: 0.125,
            depth_multiplier: 0.125,
            ..NetworkConfig::new(n_frames)
        }
    }

    pub fn widths(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, &c) in out.iter_mut().zip(&self.base_widths) {
            *o = (((c as f64) * self.width_multiplier).round() as usize).max(8);
        }
        out
    }

    pub fn depths(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, &d) in out.iter_mut().zip(&self.base_depths) {
            *o = (((d as f64) * self.depth_multiplier).round() as usize).max(1);
        }
        out
    }
}

/// Conv + batch norm + SiLU.
#[derive(Debug, Clone)]
struct ConvBnSilu {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    stride: usize,
    bn_eps: f64,
    bn_momentum: f64,
}

impl ConvBnSilu {
    #[allow(clippy::too_many_arguments)]
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_conv(rng, c_out, c_in, k), true);
        let gamma = store.add(format!("{name}.bn.g"), Array4::ones((1, c_out, 1, 1)), true);
        let beta = store.add(format!("{name}.bn.b"), Array4::zeros((1, c_out, 1, 1)), true);
        let run_mean = store.add(format!("{name}.bn.rm"), Array4::zeros((1, c_out, 1, 1)), false);
        let run_var = store.add(format!("{name}.bn.rv"), Array4::ones((1, c_out, 1, 1)), false);
        ConvBnSilu {
            w,
            gamma,
            beta,
            run_mean,
            run_var,
            stride,
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let c = tape.conv2d(x, w, None, self.stride);
        let n = tape.batch_norm(
            c,
            g,
            b,
            store,
            self.run_mean,
            self.run_var,
            F::real(self.bn_eps),
            F::real(self.bn_momentum),
        );
        tape.silu(n)
    }
}

/// 1x1 reduce -> 3x3 expand with residual add, at constant width.
#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBnSilu,
    expand: ConvBnSilu,
}

impl Bottleneck {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Bottleneck {
            reduce: ConvBnSilu::init(store, &format!("{name}.reduce"), c, c, 1, 1, cfg, rng),
            expand: ConvBnSilu::init(store, &format!("{name}.expand"), c, c, 3, 1, cfg, rng),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let a = self.reduce.forward(tape, store, x);
        let b = self.expand.forward(tape, store, a);
        tape.add(b, x)
    }
}

/// Cross-stage partial block: the input splits into two half-width paths,
/// one of which runs the bottleneck chain; the halves are re-joined by a
/// 1x1 transition conv.
#[derive(Debug, Clone)]
struct CspBlock {
    split_main: ConvBnSilu,
    split_short: ConvBnSilu,
    blocks: Vec<Bottleneck>,
    transition: ConvBnSilu,
}

impl CspBlock {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c: usize,
        depth: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let half = (c / 2).max(1);
        let blocks = (0..depth)
            .map(|i| Bottleneck::init(store, &format!("{name}.m{i}"), half, cfg, rng))
            .collect();
        CspBlock {
            split_main: ConvBnSilu::init(store, &format!("{name}.main"), c, half, 1, 1, cfg, rng),
            split_short: ConvBnSilu::init(store, &format!("{name}.short"), c, half, 1, 1, cfg, rng),
            blocks,
            transition: ConvBnSilu::init(store, &format!("{name}.out"), 2 * half, c, 1, 1, cfg, rng),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let mut main = self.split_main.forward(tape, store, x);
        for b in &self.blocks {
            main = b.forward(tape, store, main);
        }
        let short = self.split_short.forward(tape, store, x);
        let cat = tape.concat_c(&[main, short]);
        self.transition.forward(tape, store, cat)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvBnSilu,
    csp: CspBlock,
}

/// SPP bridge: 1x1 reduce, parallel same-padded max pools concatenated with
/// the identity, 1x1 back to the stage width.
#[derive(Debug, Clone)]
struct SppBridge {
    reduce: ConvBnSilu,
    out: ConvBnSilu,
}

impl SppBridge {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let half = (c / 2).max(1);
        SppBridge {
            reduce: ConvBnSilu::init(store, &format!("{name}.reduce"), c, half, 1, 1, cfg, rng),
            out: ConvBnSilu::init(
                store,
                &format!("{name}.out"),
                half * (SPP_KERNELS.len() + 1),
                c,
                1,
                1,
                cfg,
                rng,
            ),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let r = self.reduce.forward(tape, store, x);
        let mut branches = vec![r];
        for &k in &SPP_KERNELS {
            branches.push(tape.max_pool_same(r, k));
        }
        let cat = tape.concat_c(&branches);
        self.out.forward(tape, store, cat)
    }
}

/// Fusion: bilinear 2x upsample of the deep map, 1x1 conv to the shallow
/// width, channel concat with the shallow map, 3x3 conv.
#[derive(Debug, Clone)]
struct Fuse {
    reduce: ConvBnSilu,
    out: ConvBnSilu,
}

impl Fuse {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_deep: usize,
        c_shallow: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Fuse {
            reduce: ConvBnSilu::init(store, &format!("{name}.reduce"), c_deep, c_shallow, 1, 1, cfg, rng),
            out: ConvBnSilu::init(store, &format!("{name}.out"), 2 * c_shallow, c_shallow, 3, 1, cfg, rng),
        }
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        deep: NodeId,
        shallow: NodeId,
    ) -> Result<NodeId> {
        let up = tape.upsample2x(deep);
        let (_, _, hu, wu) = tape.value(up).dim();
        let (_, _, hs, ws) = tape.value(shallow).dim();
        if (hu, wu) != (hs, ws) {
            return Err(Error::shape(format!(
                "fuse stride mismatch: upsampled deep {hu}x{wu} vs shallow {hs}x{ws}"
            )));
        }
        let red = self.reduce.forward(tape, store, up);
        let cat = tape.concat_c(&[red, shallow]);
        Ok(self.out.forward(tape, store, cat))
    }
}

/// Plain conv head (bias, no norm).
#[derive(Debug, Clone)]
struct HeadConv {
    w: ParamId,
    b: ParamId,
}

impl HeadConv {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        HeadConv {
            w: store.add(format!("{name}.w"), kaiming_conv(rng, c_out, c_in, 3), true),
            b: store.add(
                format!("{name}.b"),
                Array4::from_elem((1, c_out, 1, 1), F::real(bias_init)),
                true,
            ),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), 1)
    }
}

/// Decoded head maps: confidence in [0,1] and strictly positive
/// (left, top, right, bottom) distances in input pixels, both at stride 2.
#[derive(Debug, Clone)]
pub struct HeadOutputs<F> {
    /// (N, 1, H/2, W/2)
    pub conf: Array4<F>,
    /// (N, 4, H/2, W/2), channel order: left, top, right, bottom
    pub reg: Array4<F>,
}

/// A recorded forward pass; keeps the tape alive so the caller can seed
/// gradients at the head outputs.
pub struct ForwardPass<F: Real> {
    pub tape: Tape<F>,
    pub conf: NodeId,
    pub reg: NodeId,
}

impl<F: Real> ForwardPass<F> {
    pub fn outputs(&self) -> HeadOutputs<F> {
        HeadOutputs {
            conf: self.tape.value(self.conf).clone(),
            reg: self.tape.value(self.reg).clone(),
        }
    }
}

/// The full detector: aggregation + backbone + SPP + fusion chain + heads,
/// with its parameter store.
pub struct Model<F: Real> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<F>,
    agg: AggregationParams,
    stages: Vec<Stage>,
    spp: SppBridge,
    fuses: Vec<Fuse>,
    conf_head: HeadConv,
    reg_head: HeadConv,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let agg_cfg = AggregationConfig {
            n_frames: cfg.n_frames,
            c_agg: cfg.c_agg,
            c_out: 3 * cfg.n_frames + 1,
        };
        let agg = AggregationParams::init(&mut store, agg_cfg, &mut rng);
        let widths = cfg.widths();
        let depths = cfg.depths();
        let mut stages = Vec::with_capacity(5);
        let mut c_in = agg_cfg.c_out;
        for k in 0..5 {
            let down = ConvBnSilu::init(
                &mut store,
                &format!("backbone.s{k}.down"),
                c_in,
                widths[k],
                3,
                2,
                &cfg,
                &mut rng,
            );
            let csp = CspBlock::init(
                &mut store,
                &format!("backbone.s{k}.csp"),
                widths[k],
                depths[k],
                &cfg,
                &mut rng,
            );
            stages.push(Stage { down, csp });
            c_in = widths[k];
        }
        let spp = SppBridge::init(&mut store, "spp", widths[4], &cfg, &mut rng);
        let mut fuses = Vec::with_capacity(4);
        for k in (1..5).rev() {
            // P_{k+1} (width widths[k]) fused with C_k (width widths[k-1])
            fuses.push(Fuse::init(
                &mut store,
                &format!("fuse.p{k}"),
                widths[k],
                widths[k - 1],
                &cfg,
                &mut rng,
            ));
        }
        // start the confidence prior low (sigmoid ~ 0.05) so the early
        // negative-dominated gradient does not slam the head into the flat
        // tail of the sigmoid, where the squared-error gradient vanishes
        let conf_prior: f64 = (0.05f64 / 0.95).ln();
        let conf_head = HeadConv::init(&mut store, "head.conf", widths[0], 1, conf_prior, &mut rng);
        let reg_head = HeadConv::init(&mut store, "head.reg", widths[0], 4, 0.0, &mut rng);
        Model {
            cfg,
            store,
            agg,
            stages,
            spp,
            fuses,
            conf_head,
            reg_head,
        }
    }

    pub fn aggregation(&self) -> &AggregationParams {
        &self.agg
    }

    /// Aggregate a stacked window (N, 3n, H, W); H, W must be divisible by 32.
    pub fn aggregate(&self, tape: &mut Tape<F>, x: NodeId) -> Result<NodeId> {
        self.agg.aggregate(tape, &self.store, x)
    }

    /// C1..C5 at strides 2, 4, 8, 16, 32.
    pub fn backbone_forward(&self, tape: &mut Tape<F>, agg: NodeId) -> Result<[NodeId; 5]> {
        let (_, _, h, w) = tape.value(agg).dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "backbone input {h}x{w} must be divisible by 32"
            )));
        }
        let mut maps = [agg; 5];
        let mut x = agg;
        for (k, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(tape, &self.store, x);
            x = stage.csp.forward(tape, &self.store, x);
            maps[k] = x;
        }
        Ok(maps)
    }

    pub fn spp_bridge(&self, tape: &mut Tape<F>, c5: NodeId) -> NodeId {
        self.spp.forward(tape, &self.store, c5)
    }

    /// One fusion step: deep P_{k+1} + shallow C_k -> P_k.
    /// `level` is 0 for P5+C4, 1 for P4+C3, 2 for P3+C2, 3 for P2+C1.
    pub fn fuse(
        &self,
        tape: &mut Tape<F>,
        level: usize,
        deep: NodeId,
        shallow: NodeId,
    ) -> Result<NodeId> {
        self.fuses[level].forward(tape, &self.store, deep, shallow)
    }

    /// Twin heads on P1: sigmoid confidence and exp distances.
    pub fn heads(&self, tape: &mut Tape<F>, p1: NodeId) -> (NodeId, NodeId) {
        let c = self.conf_head.forward(tape, &self.store, p1);
        let conf = tape.sigmoid(c);
        let r = self.reg_head.forward(tape, &self.store, p1);
        let reg = tape.exp(r);
        (conf, reg)
    }

    /// Build the full graph on a caller-provided tape and parameter store
    /// (the store may differ from `self.store`, e.g. for finite-difference
    /// probing). Returns the (conf, reg) head nodes.
    pub fn graph(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        xin: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let agg = self.agg.aggregate(tape, store, xin)?;
        let (_, _, h, w) = tape.value(agg).dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "backbone input {h}x{w} must be divisible by 32"
            )));
        }
        let mut maps = [agg; 5];
        let mut x = agg;
        for (k, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(tape, store, x);
            x = stage.csp.forward(tape, store, x);
            maps[k] = x;
        }
        let p5 = self.spp.forward(tape, store, maps[4]);
        let mut deep = p5;
        for (level, k) in (1..5).rev().enumerate() {
            deep = self.fuses[level].forward(tape, store, deep, maps[k - 1])?;
        }
        let c = self.conf_head.forward(tape, store, deep);
        let conf = tape.sigmoid(c);
        let r = self.reg_head.forward(tape, store, deep);
        let reg = tape.exp(r);
        Ok((conf, reg))
    }

    /// Full pass from a stacked window (N, 3n, H, W) to head outputs.
    pub fn forward(&self, x: Array4<F>, train: bool) -> Result<ForwardPass<F>> {
        let mut tape = Tape::new(train);
        let xin = tape.leaf(x);
        let (conf, reg) = self.graph(&mut tape, &self.store, xin)?;
        Ok(ForwardPass { tape, conf, reg })
    }

    /// Commit queued batch-norm running statistics after a training forward.
    pub fn commit_bn_stats(&mut self, pass: &mut ForwardPass<F>) {
        pass.tape
            .apply_pending_stats(&mut self.store, F::real(self.cfg.bn_momentum));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(n_frames: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((1, 3 * n_frames, h, w), |_| rng.gen::<f64>())
    }

    #[test]
    fn tiny_forward_shapes() {
        let model = Model::<f64>::new(NetworkConfig::tiny(3), 0);
        let pass = model.forward(rand_input(3, 96, 64, 1), false).unwrap();
        let out = pass.outputs();
        assert_eq!(out.conf.dim(), (1, 1, 48, 32));
        assert_eq!(out.reg.dim(), (1, 4, 48, 32));
    }

    #[test]
    fn backbone_strides_and_widths() {
        let cfg = NetworkConfig::tiny(3);
        let widths = cfg.widths();
        assert_eq!(widths, [8, 16, 32, 64, 128]);
        let model = Model::<f64>::new(cfg, 0);
        let mut tape = Tape::new(false);
        let x = tape.leaf(rand_input(3, 64, 64, 2));
        let agg = model.aggregate(&mut tape, x).unwrap();
        let c = model.backbone_forward(&mut tape, agg).unwrap();
        for (k, id) in c.iter().enumerate() {
            let (_, ch, h, w) = tape.value(*id).dim();
            let stride = 2usize.pow(k as u32 + 1);
            assert_eq!((h, w), (64 / stride, 64 / stride), "C{}", k + 1);
            assert_eq!(ch, widths[k]);
        }
    }

    #[test]
    fn width_multiplier_quarters_and_floors_at_8() {
        let mut cfg = NetworkConfig::new(3);
        cfg.width_multiplier = 0.25;
        assert_eq!(cfg.widths(), [16, 32, 64, 128, 256]);
        cfg.width_multiplier = 0.05;
        assert_eq!(cfg.widths(), [8, 8, 13, 26, 51]);
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let model = Model::<f64>::new(NetworkConfig::tiny(3), 0);
        assert!(model.forward(rand_input(3, 96, 60, 1), false).is_err());
    }

    #[test]
    fn spp_preserves_size_and_constant_maps() {
        let model = Model::<f64>::new(NetworkConfig::tiny(3), 0);
        let mut tape = Tape::new(false);
        let c5 = tape.leaf(Array4::from_elem((1, 128, 21, 12), 0.4));
        let p5 = model.spp_bridge(&mut tape, c5);
        let v = tape.value(p5);
        assert_eq!(v.dim(), (1, 128, 21, 12));
        // constant input stays constant per channel through pools and convs
        for ch in 0..128usize {
            let plane = v.slice(ndarray::s![0, ch, .., ..]);
            let first = plane[[0usize, 0usize]];
            assert!(plane.iter().all(|&x| (x - first).abs() < 1e-9));
        }
    }

    #[test]
    fn heads_with_zero_params_give_half_conf_unit_reg() {
        let mut model = Model::<f64>::new(NetworkConfig::tiny(3), 0);
        for e in model.store.entries_mut() {
            if e.name.starts_with("head.") {
                e.value.fill(0.0);
            }
        }
        let mut tape = Tape::new(false);
        let p1 = tape.leaf(Array4::from_elem((1, 8, 6, 6), 0.7));
        let (conf, reg) = model.heads(&mut tape, p1);
        assert!(tape.value(conf).iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(tape.value(reg).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn head_ranges_hold_for_random_params() {
        let model = Model::<f64>::new(NetworkConfig::tiny(5), 3);
        let pass = model.forward(rand_input(5, 64, 64, 4), false).unwrap();
        let out = pass.outputs();
        assert!(out.conf.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.reg.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::<f32>::new(NetworkConfig::tiny(3), 9);
        let x = rand_input(3, 64, 64, 5).mapv(|v| v as f32);
        let a = model.forward(x.clone(), false).unwrap().outputs();
        let b = model.forward(x, false).unwrap().outputs();
        assert_eq!(a.conf, b.conf);
        assert_eq!(a.reg, b.reg);
    }
}
