//! Writes the bundled synthetic dataset (5 clusters of 2 studies) to stdout.
//!
//!     cargo run -p mlmeta-core --example example_dataset > data/example.csv

use mlmeta_core::smd::{sample_g, SmdMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEED: u64 = 20_240_917;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (delta, omega2, tau2) = (0.4, 0.1, 0.1);
    let between = Normal::new(delta, f64::sqrt(omega2)).unwrap();
    println!("cluster,study,n_c,n_t,g");
    for cluster in 1..=5 {
        let delta_0g = between.sample(&mut rng);
        let within = Normal::new(delta_0g, f64::sqrt(tau2)).unwrap();
        for study in 1..=2 {
            let n_c = rng.random_range(8..=40);
            let n_t = rng.random_range(8..=40);
            let theta = within.sample(&mut rng);
            let g = sample_g(theta, &SmdMeta::new(n_c, n_t).unwrap(), &mut rng);
            println!("S{cluster},{study},{n_c},{n_t},{g:.6}");
        }
    }
}
