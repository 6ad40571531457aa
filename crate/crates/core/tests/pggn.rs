use cirrus::pggn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latent(rng: &mut ChaCha8Rng, q: usize) -> Vec<f64> {
    (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn distance(a: &GridSet, b: &GridSet) -> f64 {
    a.components().zip(b.components()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn untrained_discriminator_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = GeneratorWeights::random(52, 2);
    let disc = DiscriminatorWeights::random(3);
    let real: Vec<GridSet> = (0..50).map(|i| sample_real_gridset(500 + i)).collect();
    let zs: Vec<Vec<f64>> = (0..50).map(|_| latent(&mut rng, 52)).collect();
    let fake = gen.generate_batch(&zs).unwrap();
    let dr = disc.discriminate_batch(&real).unwrap();
    let df = disc.discriminate_batch(&fake).unwrap();
    let correct = dr.iter().filter(|&&p| p >= 0.5).count() + df.iter().filter(|&&p| p < 0.5).count();
    let acc = correct as f64 / 100.0;
    assert!((acc - 0.5).abs() <= 0.15, "accuracy {acc}");
    assert!(dr.iter().chain(&df).all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn generator_is_lipschitz_on_the_latent_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gen = GeneratorWeights::random(52, 9);
    let mut lipschitz: f64 = 0.0;
    for _ in 0..100 {
        let z = latent(&mut rng, 52);
        let step: Vec<f64> = (0..52).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let z2: Vec<f64> = z.iter().zip(&step).map(|(a, d)| (a + d).clamp(-1.0, 1.0)).collect();
        let dz = z.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let (f1, f2) = (gen.generate(&z).unwrap(), gen.generate(&z2).unwrap());
        assert!(f1.components().all(|c| (-1.0..=1.0).contains(&c)));
        lipschitz = lipschitz.max(distance(&f1, &f2) / dz);
    }
    println!("empirical Lipschitz constant {lipschitz:.3}");
    assert!(lipschitz.is_finite() && lipschitz < 1e3, "{lipschitz}");

    // Larger steps stay within the measured constant up to curvature.
    let z = latent(&mut rng, 52);
    let z2: Vec<f64> = z.iter().map(|v| (v + 0.2).clamp(-1.0, 1.0)).collect();
    let dz = z.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let far = distance(&gen.generate(&z).unwrap(), &gen.generate(&z2).unwrap());
    assert!(far <= 4.0 * lipschitz * dz, "{far} vs {}", lipschitz * dz);
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let out = train(&TrainConfig { grids_per_size: 8, epochs: 1, batch_size: 4, seed: 2, ..TrainConfig::default() }).unwrap();
    let bundle = PggnBundle { generator: out.generator, discriminator: Some(out.discriminator) };
    save_weights(&a, &bundle).unwrap();
    let loaded = load_weights(&a).unwrap();
    save_weights(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let z = vec![0.3; 52];
    assert_eq!(bundle.generator.generate(&z).unwrap(), loaded.generator.generate(&z).unwrap());
}

#[test]
fn history_has_one_entry_per_epoch() {
    for epochs in [1, 3] {
        let cfg = TrainConfig { grids_per_size: 4, epochs, batch_size: 2, seed: 1, ..TrainConfig::default() };
        let out = train(&cfg).unwrap();
        assert_eq!(out.history.len(), epochs);
        assert_eq!(out.history.iter().map(|s| s.epoch).collect::<Vec<_>>(), (0..epochs).collect::<Vec<_>>());
    }
}
