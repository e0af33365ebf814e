use gaitssl::cffn::{batch_to_input, Cffn, EncoderConfig};
use gaitssl::synth::{generate_synthetic, SynthConfig};
use gaitssl::topology::JointTopology;
use std::time::Instant;

fn main() {
    let topo = JointTopology::canonical16();
    let cfg = SynthConfig { n_samples: 32, seed: 1, ..SynthConfig::default() };
    let ds = generate_synthetic(&cfg, &topo).unwrap();
    let refs: Vec<&gaitssl::sequence::SkeletonSequence> = ds.sequences.iter().collect();
    let x = batch_to_input::<f32>(&refs);
    let enc = Cffn::<f32>::new(EncoderConfig::default(), &topo, 0).unwrap();
    let branch = &enc.graph;

    // replicate the branch forward manually with per-unit timing
    let reps = 10;
    let mut cur = x.clone();
    // data bn timing
    let t0 = Instant::now();
    for _ in 0..reps {
        let (_y, _c) = branch.data_bn.forward_stats(&to_bn(&cur));
    }
    println!("data_bn: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    for (i, unit) in branch.units.iter().enumerate() {
        let t0 = Instant::now();
        let mut out = None;
        for _ in 0..reps {
            let (y, _cache) = unit.forward_stats(cur.clone(), &branch.adj);
            out = Some(y);
        }
        let dt = t0.elapsed().as_secs_f64()*1000.0/reps as f64;
        println!("unit{i} fwd: {dt:.1} ms (in shape {:?})", cur.shape());
        cur = out.unwrap();
    }
}

fn to_bn(x: &ndarray::Array4<f32>) -> ndarray::Array3<f32> {
    let s = x.shape();
    let (n, c, t, j) = (s[0], s[1], s[2], s[3]);
    let perm = x.view().permuted_axes([0, 1, 3, 2]);
    let std = perm.as_standard_layout().into_owned();
    std.into_shape_with_order((n, c * j, t)).unwrap()
}
