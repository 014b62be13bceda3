//! Reverse-mode gradients of a small two-layer network against central
//! finite differences.

use gfr::autodiff::{Tape, Tensor};
use gfr::nn::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gfr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Mlp::new("net", &[3, 8, 4], &mut rng);
    let data: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::matrix(5, 3, data)?;
    let labels = [0, 3, 1, 2, 3];

    let loss_at = |x: &Tensor| -> gfr::Result<f64> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let logits = net.forward(&mut t, xv)?;
        let l = t.softmax_cross_entropy(logits, &labels)?;
        Ok(t.value(l).item())
    };

    let mut tape = Tape::new();
    let xv = tape.input(x.clone().with_grad());
    let logits = net.forward(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(&tape, xv);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let numeric = (loss_at(&up)? - loss_at(&down)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12));
        println!("d loss / d x[{i:2}]  analytic {a:+.8}  numeric {numeric:+.8}");
    }
    println!("loss {:.6}, worst relative error {worst:.2e}", tape.value(loss).item());
    Ok(())
}
