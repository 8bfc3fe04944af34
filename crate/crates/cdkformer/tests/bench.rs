use cdkformer::autodiff::Tape;
use cdkformer::loss::compute_loss;
use cdkformer::model::{CdkFormer, ModelConfig, ModelInputs};
use cdkformer::rng::RngStream;
use cdkformer::scene::AgentKind;
use cdkformer::synth::{generate_synthetic, GenConfig};

#[test]
#[ignore]
fn bench_forward_backward() {
    let gen_cfg = GenConfig::default();
    let mut rng = RngStream::new(1);
    let corpus = generate_synthetic(8, 0.25, &mut rng, &gen_cfg);
    let config = ModelConfig::default();
    let model = CdkFormer::new(config.clone(), 1).unwrap();
    println!("params: {}", model.n_params());
    let inputs: Vec<ModelInputs> = corpus.iter().map(|s| ModelInputs::from_scenario(s, &config).unwrap()).collect();
    let kinds: Vec<Vec<AgentKind>> = corpus.iter().map(|s| s.agents.iter().map(|a| a.kind).collect()).collect();

    let start = std::time::Instant::now();
    let reps = 3;
    for r in 0..reps {
        let mut grads = model.store.zero_grads();
        for (i, inp) in inputs.iter().enumerate() {
            let mut drng = RngStream::new(7).substream(r * 100 + i as u64);
            let mut tape = Tape::new();
            let (_, out) = model.forward(&mut tape, inp, Some(&mut drng));
            let loss = compute_loss(&mut tape, &out, inp, 1.0, 0.1, &config.ablation, config.k_modes, &kinds[i]).unwrap();
            tape.backward(loss.total, 1.0 / 8.0);
            tape.export_grads(&mut grads, 1.0);
        }
    }
    let per = start.elapsed().as_secs_f64() / (reps as f64 * 8.0);
    println!("fwd+bwd per scenario (d=64): {:.1} ms", per * 1000.0);

    // Small config used by the directional experiments.
    let config32 = ModelConfig { d: 32, d_ff: 64, n_experts: 4, ..ModelConfig::default() };
    let model32 = CdkFormer::new(config32.clone(), 1).unwrap();
    println!("params32: {}", model32.n_params());
    let inputs32: Vec<ModelInputs> = corpus.iter().map(|s| ModelInputs::from_scenario(s, &config32).unwrap()).collect();
    let start = std::time::Instant::now();
    for r in 0..reps {
        let mut grads = model32.store.zero_grads();
        for (i, inp) in inputs32.iter().enumerate() {
            let mut drng = RngStream::new(7).substream(r * 100 + i as u64);
            let mut tape = Tape::new();
            let (_, out) = model32.forward(&mut tape, inp, Some(&mut drng));
            let loss = compute_loss(&mut tape, &out, inp, 1.0, 0.1, &config32.ablation, config32.k_modes, &kinds[i]).unwrap();
            tape.backward(loss.total, 1.0 / 8.0);
            tape.export_grads(&mut grads, 1.0);
        }
    }
    let per32 = start.elapsed().as_secs_f64() / (reps as f64 * 8.0);
    println!("fwd+bwd per scenario (d=32): {:.1} ms", per32 * 1000.0);
}
