use motion_distill_core::diffusion::{make_schedule, Diffusion, TeacherTrainer};
use motion_distill_core::models::{DenoiserModel, ModelConfig, TeacherConfig};
use motion_distill_core::optim::AdamWConfig;
use motion_distill_core::rng;
use motion_distill_core::synth::{generate, SyntheticCorpusSpec};

#[test]
fn teacher_loss_halves_within_500_steps() {
    let spec = SyntheticCorpusSpec {
        joints: 3,
        observed: 4,
        future: 8,
        n_train: 50,
        n_test: 1,
        n_modes: 3,
        n_families: 4,
        band_limit: 3,
        noise_floor: 0.005,
        seed: 21,
    };
    let corpus = generate(&spec).unwrap().train;
    let d = Diffusion::new(make_schedule(1000, "cosine").unwrap(), 4, 8, 6).unwrap();
    let cfg = TeacherConfig { n_layers: 2, d_model: 32, n_heads: 1, ffn_dim: 64, se_reduction: 4, retained: 6, joints: 3 };
    let mut model = DenoiserModel::new(ModelConfig::Teacher(cfg), &mut rng::seeded(22)).unwrap();
    let mut trainer = TeacherTrainer::new(&d, &model, AdamWConfig { lr: 1e-3, ..AdamWConfig::default() });
    let batch = corpus.gather(&(0..corpus.len()).collect::<Vec<_>>());
    let mut r = rng::seeded(23);
    let losses: Vec<f64> = (0..500).map(|_| trainer.step(&mut model, &batch, &mut r, 1e-3).unwrap()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&losses[..10]), mean(&losses[490..]));
    assert!(late <= 0.5 * early, "first-10 mean {early:.4}, last-10 mean {late:.4}");
}
