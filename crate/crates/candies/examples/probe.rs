use candies::mixture::{train, TrainConfig};
use candies::stats::Gaussian;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    // data-seed x train-seed sweep, single gaussian
    for dseed in [7u64, 8, 9] {
        let mut rng = ChaCha8Rng::seed_from_u64(dseed);
        let g = Gaussian::isotropic(DVector::from_vec(vec![2.0, -1.0]), 0.25).unwrap();
        let samples: Vec<DVector<f64>> = (0..500).map(|_| g.sample(&mut rng)).collect();
        print!("1-gauss dseed {dseed}, J per train seed:");
        for seed in 0..10u64 {
            let cfg = TrainConfig { j_max: 5, seed, ..Default::default() };
            let m = train(&samples, &cfg).unwrap();
            print!(" {}", m.components().len());
        }
        println!();
    }
    let blobs = [(-4.0,-4.0),(-4.0,4.0),(4.0,-4.0),(4.0,4.0)];
    for dseed in [11u64, 12] {
        let mut samples4 = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(dseed);
        for &(a,b) in &blobs {
            let g = Gaussian::isotropic(DVector::from_vec(vec![a, b]), 0.36).unwrap();
            samples4.extend((0..150).map(|_| g.sample(&mut rng)));
        }
        print!("4-blob dseed {dseed}, J per train seed:");
        for seed in 0..10u64 {
            let cfg = TrainConfig { j_max: 6, seed, ..Default::default() };
            let m = train(&samples4, &cfg).unwrap();
            print!(" {}", m.components().len());
        }
        println!();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = Gaussian::isotropic(DVector::from_vec(vec![5.0;6]), 0.12).unwrap();
    let cluster: Vec<DVector<f64>> = (0..10).map(|_| g.sample(&mut rng)).collect();
    print!("10-pt cluster D=6, J per train seed:");
    for seed in 0..10u64 {
        let cfg = TrainConfig { j_max: 3, seed, covariance_prior_scale: 15.0, ..Default::default() };
        let m = train(&cluster, &cfg).unwrap();
        print!(" {}", m.components().len());
    }
    println!();
}
