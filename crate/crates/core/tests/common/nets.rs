use dynprune_core::model::{build_toy_net, LayerParams, Network};
use dynprune_core::pruning::{prune, prune_fixed_rate, GroupAssignment, LayerAssignment, PrunedStructure};
use dynprune_core::Tensor;
use rand::Rng;

use super::rng;

/// Index of the toy net's grouped convolution.
pub const GROUPED: usize = 4;

/// Toy net with perturbed weights and batchnorm statistics, so channel
/// permutations and slicing mistakes show up in the output.
pub fn varied_net(seed: u64) -> Network {
    let mut r = rng(seed);
    let mut net = Network::init(build_toy_net(), &mut r).unwrap();
    for p in &mut net.params {
        if let LayerParams::BatchNorm { gamma, beta, running_mean, running_var } = p {
            *gamma = Tensor::uniform(gamma.shape(), 0.5, 1.5, &mut r);
            *beta = Tensor::uniform(beta.shape(), -0.5, 0.5, &mut r);
            running_mean.iter_mut().for_each(|m| *m = r.gen_range(-0.3..0.3));
            running_var.iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
        }
    }
    // uneven filter energies give uneven pruning
    let w = net.conv_weight_mut(GROUPED).unwrap();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v *= 1.0 + ((i / 9) % 5) as f64;
    }
    net
}

/// A random assignment of the grouped layer pruned by either criterion.
pub fn random_structure(net: &Network, r: &mut impl Rng) -> PrunedStructure {
    loop {
        let groups = r.gen_range(1..=4);
        let a = GroupAssignment {
            layers: vec![LayerAssignment::new(GROUPED, groups, (0..8).map(|_| r.gen_range(0..groups)).collect()).unwrap()],
        };
        let s = if r.gen_bool(0.5) {
            prune(net, &a, r.gen_range(0.0..0.8))
        } else {
            prune_fixed_rate(net, &a, [0.0, 0.25, 0.5, 0.75][r.gen_range(0..4)])
        };
        if let Ok(s) = s {
            return s;
        }
    }
}
