//! Wall-clock breakdown of the training step phases.
use f2m_core::networks::{NetConfig, Networks, one_hot_batch, concat_channels};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut nets: Networks<f32> = Networks::init(NetConfig::paper(3, 3), &mut rng).unwrap();
    let n = 64;
    let images = Array4::<f32>::from_shape_simple_fn((n, 1, 64, 64), || rng.random::<f32>());
    let margins: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let m_oh = one_hot_batch::<f32>(&margins, 3);

    let time = |label: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        f();
        println!("{label}: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0);
    };

    let p1 = nets.e1.forward_train(&m_oh);
    let p2 = nets.e2.forward_train(&m_oh);
    let enc_in = concat_channels(&images, &p1, &p2);
    let mut latent = None;
    time("enc fwd (B=64)", &mut || latent = Some(nets.gen.encode_train(&enc_in, true)));
    let latent = latent.unwrap();
    let mut fake = None;
    time("dec fwd (B=64)", &mut || fake = Some(nets.gen.decode_train(&latent, true)));
    let fake = fake.unwrap();
    time("dec bwd", &mut || { nets.gen.decoder_backward(&fake, true); });
    time("enc bwd", &mut || { nets.gen.encoder_backward(&latent, true, true); });

    let x2 = ndarray::concatenate(ndarray::Axis(0), &[images.view(), fake.view()]).unwrap()
        .as_standard_layout().to_owned();
    let mut logits = None;
    time("d1 fwd (B=128)", &mut || logits = Some(nets.d1.forward_train(&x2, true)));
    let logits = logits.unwrap();
    time("d1 bwd (params)", &mut || { nets.d1.backward(&logits, false, true); });
    time("d1 bwd (input)", &mut || { nets.d1.backward(&logits, true, false); });
}
