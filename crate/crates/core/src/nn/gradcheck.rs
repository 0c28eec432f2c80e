//! Finite-difference verification of tape gradients, double precision only.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Tape};

/// Which parameter scalars to probe with finite differences.
pub enum Probe {
    All,
    /// Randomly sample this many scalars, seeded.
    Sample { count: usize, seed: u64 },
}

/// Compare analytic gradients of sum(outputs) against central finite
/// differences with step `eps`. Returns the max relative error, with the
/// denominator floored to avoid blow-ups on near-zero gradients.
pub fn max_param_grad_rel_error(
    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Vec<NodeId>,
    store: &mut ParamStore<f64>,
    eps: f64,
    probe: Probe,
) -> f64 {
    let objective = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new(true);
        let outs = build(&mut tape, store);
        outs.iter().map(|&o| tape.value(o).sum()).sum()
    };

    // analytic pass
    let mut tape = Tape::new(true);
    let outs = build(&mut tape, store);
    store.zero_grads();
    let seeds = outs
        .iter()
        .map(|&o| (o, Array4::from_elem(tape.value(o).raw_dim(), 1.0)))
        .collect();
    tape.backward(seeds, store);

    let mut coords: Vec<(usize, usize)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.len()).map(move |k| (i, k)))
        .collect();
    if let Probe::Sample { count, seed } = probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(count);
    }

    let mut max_rel = 0.0f64;
    for (pi, k) in coords {
        let analytic = store.entries()[pi].grad.as_slice().unwrap()[k];
        let orig = store.entries()[pi].value.as_slice().unwrap()[k];
        store.entries_mut()[pi].value.as_slice_mut().unwrap()[k] = orig + eps;
        let fp = objective(store);
        store.entries_mut()[pi].value.as_slice_mut().unwrap()[k] = orig - eps;
        let fm = objective(store);
        store.entries_mut()[pi].value.as_slice_mut().unwrap()[k] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
