//! Save and reload float and quantized weight files, then run inference
//! from the reloaded network.
//!
//!     cargo run --example weight_files

use ipsr::srnet::io::{load_weights, save_quantized, save_weights, LoadedNetwork};
use ipsr::srnet::{build_network, calibrate_and_quantize, Tensor, Weights};

fn main() {
    let dir = std::env::temp_dir().join("ipsr-weight-files-example");
    std::fs::create_dir_all(&dir).unwrap();

    let weights = Weights::init(build_network(16, 2, 3, true).unwrap(), 4);
    let float_path = dir.join("net.ipsr");
    save_weights(&weights, &float_path).unwrap();
    println!(
        "wrote float weights ({} parameters, {} bytes)",
        weights.param_count(),
        std::fs::metadata(&float_path).unwrap().len()
    );

    let calib = vec![Tensor::new(
        1,
        3,
        12,
        12,
        (0..432).map(|i| i as f64 / 432.0).collect(),
    )];
    let q = calibrate_and_quantize(&weights, &calib).unwrap();
    let quant_path = dir.join("net-q.ipsr");
    save_quantized(&q, &quant_path).unwrap();
    println!(
        "wrote quantized weights ({} bytes)",
        std::fs::metadata(&quant_path).unwrap().len()
    );

    let x = Tensor::new(1, 3, 9, 9, vec![0.4; 243]);
    for path in [&float_path, &quant_path] {
        let y = match load_weights(path).unwrap() {
            LoadedNetwork::Float(w) => {
                println!("{}: float network", path.display());
                ipsr::srnet::forward(&w, &x).unwrap()
            }
            LoadedNetwork::Quantized(q) => {
                println!("{}: quantized network", path.display());
                q.forward(&x).unwrap()
            }
        };
        println!("  output {}x{}x{}x{}", y.n, y.c, y.h, y.w);
    }
}
