use regionseg::tensor::conv::*;
use std::time::Instant;

fn main() {
    let (b, cin, cout, x, y, z) = (2usize, 16usize, 16usize, 16, 16, 16);
    let n_in = b * cin * x * y * z;
    let input: Vec<f64> = (0..n_in).map(|i| (i % 97) as f64 * 0.01).collect();
    let weight: Vec<f64> = (0..cout * cin * 27).map(|i| (i % 53) as f64 * 0.001).collect();
    let bias = vec![0.1; cout];
    let gout: Vec<f64> = (0..b * cout * x * y * z).map(|i| (i % 89) as f64 * 0.01).collect();
    let macs = (b * cin * cout * x * y * z * 27) as f64;

    let reps = 40;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        let out = conv3d_forward(&input, b, cin, x, y, z, &weight, cout, &bias);
        sink += out[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("forward: {:.2} GMAC/s (sink {sink})", macs * reps as f64 / dt / 1e9);

    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        let (gin, gw, gb) = conv3d_backward(&input, b, cin, x, y, z, &weight, cout, &gout);
        sink += gin[0] + gw[0] + gb[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("backward (2x macs): {:.2} GMAC/s (sink {sink})", 2.0 * macs * reps as f64 / dt / 1e9);
}
