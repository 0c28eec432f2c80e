//! Correlation-attention feature aggregation: fuses n consecutive frames
//! into one multi-channel image the detector consumes.
//!
//! Dataflow: X = concat(x1..xn) over channels, F1 = conv_in(X),
//! F2 = conv_att(F1), F3 = sigmoid(F2), F4 = F3 * F2 (spatial attention),
//! F5 = F4 + F1 (residual), F6 = conv_out(F5).

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamId, ParamStore, Tape};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    /// Number of input frames (odd).
    pub n_frames: usize,
    /// Internal width of F1..F5.
    pub c_agg: usize,
    /// Output channel count; defaults to 3n+1.
    pub c_out: usize,
}

impl AggregationConfig {
    pub fn new(n_frames: usize) -> Self {
        let c = 3 * n_frames + 1;
        AggregationConfig {
            n_frames,
            c_agg: c,
            c_out: c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AggregationParams {
    pub cfg: AggregationConfig,
    conv_in_w: ParamId,
    conv_in_b: ParamId,
    conv_att_w: ParamId,
    conv_att_b: ParamId,
    conv_out_w: ParamId,
    conv_out_b: ParamId,
}

pub(crate) fn kaiming_conv<F: Real>(
    rng: &mut impl Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Array4<F> {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Array4::from_shape_fn((c_out, c_in, k, k), |_| {
        F::real(rng.gen_range(-bound..bound))
    })
}

impl AggregationParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        cfg: AggregationConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let c_in = 3 * cfg.n_frames;
        let conv_in_w = store.add("agg.conv_in.w", kaiming_conv(rng, cfg.c_agg, c_in, 3), true);
        let conv_in_b = store.add("agg.conv_in.b", Array4::zeros((1, cfg.c_agg, 1, 1)), true);
        let conv_att_w = store.add(
            "agg.conv_att.w",
            kaiming_conv(rng, cfg.c_agg, cfg.c_agg, 3),
            true,
        );
        let conv_att_b = store.add("agg.conv_att.b", Array4::zeros((1, cfg.c_agg, 1, 1)), true);
        let conv_out_w = store.add(
            "agg.conv_out.w",
            kaiming_conv(rng, cfg.c_out, cfg.c_agg, 3),
            true,
        );
        let conv_out_b = store.add("agg.conv_out.b", Array4::zeros((1, cfg.c_out, 1, 1)), true);
        AggregationParams {
            cfg,
            conv_in_w,
            conv_in_b,
            conv_att_w,
            conv_att_b,
            conv_out_w,
            conv_out_b,
        }
    }

    /// Aggregate a stacked window (N, 3n, H, W) into (N, c_out, H, W).
    pub fn aggregate<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (_, c, _, _) = tape.value(x).dim();
        if c != 3 * self.cfg.n_frames {
            return Err(Error::shape(format!(
                "aggregate expects {} channels (3 x {} frames), got {c}",
                3 * self.cfg.n_frames,
                self.cfg.n_frames
            )));
        }
        let w_in = tape.param(store, self.conv_in_w);
        let b_in = tape.param(store, self.conv_in_b);
        let w_att = tape.param(store, self.conv_att_w);
        let b_att = tape.param(store, self.conv_att_b);
        let w_out = tape.param(store, self.conv_out_w);
        let b_out = tape.param(store, self.conv_out_b);

        let f1 = tape.conv2d(x, w_in, Some(b_in), 1);
        let f2 = tape.conv2d(f1, w_att, Some(b_att), 1);
        let f3 = tape.sigmoid(f2);
        let f4 = tape.mul(f3, f2);
        let f5 = tape.add(f4, f1);
        Ok(tape.conv2d(f5, w_out, Some(b_out), 1))
    }
}

/// Build a fresh aggregation stack and return the max relative error of its
/// analytic parameter gradients against central finite differences, on a
/// random tiny input. Double precision only.
pub fn aggregation_gradcheck(n_frames: usize, h: usize, w: usize, eps: f64, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = AggregationConfig::new(n_frames);
    let params = AggregationParams::init(&mut store, cfg, &mut rng);
    let x = Array4::from_shape_fn((1, 3 * n_frames, h, w), |_| rng.gen::<f64>());
    let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let xin = tape.leaf(x.clone());
        vec![params.aggregate(tape, store, xin).unwrap()]
    };
    crate::nn::gradcheck::max_param_grad_rel_error(
        &build,
        &mut store,
        eps,
        crate::nn::gradcheck::Probe::All,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward(n: usize, h: usize, w: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = AggregationParams::init(&mut store, AggregationConfig::new(n), &mut rng);
        let mut tape = Tape::new(false);
        let x = Array4::from_shape_fn((1, 3 * n, h, w), |_| rng.gen::<f64>());
        let xin = tape.leaf(x);
        let out = params.aggregate(&mut tape, &store, xin).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_channels_are_3n_plus_1() {
        assert_eq!(forward(5, 8, 12).dim(), (1, 16, 8, 12));
        assert_eq!(forward(3, 8, 12).dim(), (1, 10, 8, 12));
    }

    #[test]
    fn spatial_size_preserved_for_odd_dims() {
        assert_eq!(forward(3, 7, 11).dim(), (1, 10, 7, 11));
    }

    #[test]
    fn zero_weights_give_bias_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = AggregationParams::init(&mut store, AggregationConfig::new(3), &mut rng);
        for e in store.entries_mut() {
            e.value.fill(0.0);
        }
        // set conv_out bias to a marker value
        let bias = 0.75;
        for e in store.entries_mut() {
            if e.name == "agg.conv_out.b" {
                e.value.fill(bias);
            }
        }
        let mut tape = Tape::new(false);
        let x = Array4::from_shape_fn((1, 9, 6, 6), |_| 0.3);
        let xin = tape.leaf(x);
        let out = params.aggregate(&mut tape, &store, xin).unwrap();
        assert!(tape.value(out).iter().all(|&v| (v - bias).abs() < 1e-12));
    }

    #[test]
    fn attention_mask_lies_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let params = AggregationParams::init(&mut store, AggregationConfig::new(3), &mut rng);
        let mut tape = Tape::new(false);
        let x = Array4::from_shape_fn((1, 9, 6, 6), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let xin = tape.leaf(x);
        // rebuild the chain manually up to F3 to observe the mask
        let w_in = tape.param(&store, params.conv_in_w);
        let b_in = tape.param(&store, params.conv_in_b);
        let w_att = tape.param(&store, params.conv_att_w);
        let b_att = tape.param(&store, params.conv_att_b);
        let f1 = tape.conv2d(xin, w_in, Some(b_in), 1);
        let f2 = tape.conv2d(f1, w_att, Some(b_att), 1);
        let f3 = tape.sigmoid(f2);
        assert!(tape.value(f3).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gradcheck_passes_on_randomized_tiny_instances() {
        for seed in 0..20 {
            let err = aggregation_gradcheck(3, 6, 6, 1e-5, seed);
            assert!(err < 1e-3, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn zero_input_gives_zero_conv_in_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let params = AggregationParams::init(&mut store, AggregationConfig::new(3), &mut rng);
        let mut tape = Tape::new(true);
        let x = Array4::zeros((1, 9, 6, 6));
        let xin = tape.leaf(x);
        let out = params.aggregate(&mut tape, &store, xin).unwrap();
        let ones = Array4::from_elem(tape.value(out).raw_dim(), 1.0);
        store.zero_grads();
        tape.backward(vec![(out, ones)], &mut store);
        let wgrad = store.grad(params.conv_in_w);
        assert!(wgrad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mismatched_channel_count_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = AggregationParams::init(&mut store, AggregationConfig::new(5), &mut rng);
        let mut tape = Tape::new(false);
        let xin = tape.leaf(Array4::zeros((1, 9, 6, 6)));
        assert!(params.aggregate(&mut tape, &store, xin).is_err());
    }
}
