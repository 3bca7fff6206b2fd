//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sitfuse::fusion::{Architecture, FusionPolicy, GateInput, PolicyLayout, Scheme};
use sitfuse::gridworld::{generate_environment, GenParams, ObjectClass};
use sitfuse::percept::{register_default_bank, Bank, ObservationContext, PerceptParams};
use sitfuse::{RepresentationSet, World};

pub fn desk_params() -> GenParams {
    GenParams {
        width: 32,
        height: 32,
        rooms: 5,
        room_min: 5,
        room_max: 10,
        clutter: 0.05,
        ..GenParams::default()
    }
}

pub fn world(seed: u64) -> World {
    World::new(
        format!("bench-{seed}"),
        generate_environment(seed, &desk_params()).unwrap(),
        1,
    )
}

pub fn bank() -> Bank {
    register_default_bank(&PerceptParams::default()).unwrap()
}

pub fn policy(scheme: Scheme, bank: &Bank) -> FusionPolicy {
    let layout = PolicyLayout::new(scheme, bank, GateInput::Concat, Architecture::default());
    FusionPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(1))
}

/// Representation sets for `count` nodes of `world`, targeting chairs.
pub fn reps(world: &World, bank: &Bank, count: usize) -> Vec<RepresentationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..count)
        .map(|i| {
            let node = i * 7 % world.graph.node_count();
            bank.extract(&ObservationContext::new(world, node, ObjectClass::Chair), &mut rng)
        })
        .collect()
}
