use gaitssl::cffn::{batch_to_input, Cffn, EncoderConfig};
use gaitssl::nn::GradStore;
use gaitssl::synth::{generate_synthetic, SynthConfig};
use gaitssl::topology::JointTopology;
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let topo = JointTopology::canonical16();
    let cfg = SynthConfig { n_samples: 32, seed: 1, ..SynthConfig::default() };
    let ds = generate_synthetic(&cfg, &topo).unwrap();
    let refs: Vec<&gaitssl::sequence::SkeletonSequence> = ds.sequences.iter().collect();
    let x = batch_to_input::<f32>(&refs);
    let mut enc = Cffn::<f32>::new(EncoderConfig::default(), &topo, 0).unwrap();

    // warm up
    let _ = enc.forward_train(&x);

    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let (_f, _c) = enc.forward_stats(&x);
    }
    println!("cffn forward_stats: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let (_f, _c) = enc.graph.forward_stats(&x);
    }
    println!("graph forward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let (_f, _c) = enc.image.forward_train(&x);
    }
    println!("image forward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (gf, gcache) = enc.graph.forward_stats(&x);
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = GradStore::new();
        enc.graph.backward(&gcache, &gf, "graph", &mut grads);
    }
    println!("graph backward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (imf, icache) = enc.image.forward_train(&x);
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = GradStore::new();
        enc.image.backward(&icache, &imf, "image", &mut grads);
    }
    println!("image backward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // full fused backward
    let (fused, cache) = enc.forward_stats(&x);
    let dfused = Array2::<f32>::ones(fused.raw_dim());
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = GradStore::new();
        enc.backward(&cache, &dfused, &mut grads);
    }
    println!("cffn backward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
