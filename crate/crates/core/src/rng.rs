use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator streams derived from one user seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Teacher = 1,
    Init = 2,
    Samples = 3,
    MonteCarlo = 4,
    Probe = 5,
}

pub(crate) fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
