use gaitssl::cffn::{batch_to_input, Cffn, EncoderConfig};
use gaitssl::nn::GradStore;
use gaitssl::synth::{generate_synthetic, SynthConfig};
use gaitssl::topology::JointTopology;

fn main() {
    let topo = JointTopology::canonical16();
    let cfg = SynthConfig { n_samples: 32, seed: 1, ..SynthConfig::default() };
    let ds = generate_synthetic(&cfg, &topo).unwrap();
    let refs: Vec<&gaitssl::sequence::SkeletonSequence> = ds.sequences.iter().collect();
    let x = batch_to_input::<f32>(&refs);
    let enc = Cffn::<f32>::new(EncoderConfig::default(), &topo, 0).unwrap();
    for _ in 0..2 {
        let (fused, cache) = enc.forward_stats(&x);
        let mut grads = GradStore::new();
        enc.backward(&cache, &fused, &mut grads);
    }
}
