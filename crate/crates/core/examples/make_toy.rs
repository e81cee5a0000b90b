//! Writes a small random conv net, a few random inputs and a matching
//! experiment config into a directory.
//!
//!     cargo run --example make_toy -- <dir> [inputs]

use std::fs;
use std::path::PathBuf;

use serde_json::json;
use smoothtaylor::autodiff::save_model;
use smoothtaylor::toy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    fs::create_dir_all(dir.join("inputs"))?;

    let shape = [1, 48, 48];
    save_model(&toy::random_conv_net(7, shape, 4), &dir.join("model.json"))?;
    let mut inputs = Vec::new();
    for i in 0..n {
        let name = format!("inputs/img{i:02}.tsr");
        fs::write(dir.join(&name), toy::random_image(i as u64, &shape).to_bytes())?;
        inputs.push(name);
    }
    let config = json!({
        "schema_version": 1,
        "model_path": "model.json",
        "input_paths": inputs,
        "seed": 2024,
        "output_dir": "out",
        "input_value_range": [[0.0, 1.0]],
        "methods": [
            {"method": "ig_zero", "steps": 50},
            {"method": "smoothtaylor", "sigma": 0.5, "roots": 150}
        ],
        "eval": [{"perturbation": {"kernel": 4, "steps": 10, "samples": 10}}],
        "adaptive": {"objective": "autvc", "roots": 30, "max_iterations": 5}
    });
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    println!("wrote {}", dir.join("config.json").display());
    Ok(())
}
