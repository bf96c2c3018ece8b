//! Writes a synthetic dataset as an MCWT `u8 [N, h, w, 1]` file.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macow::io::synth::{checkerboards, gaussian_mixture};
use macow::tensor::mcwt;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Mixture,
    Checkerboard,
}

#[derive(Parser, Debug)]
#[command(name = "macow-toydata", about = "Generate a synthetic toy image dataset")]
struct Args {
    #[arg(long, value_enum, default_value_t = Kind::Mixture)]
    kind: Kind,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Square image side.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    n_bits: u32,
    /// Per-pixel noise of the mixture components, in quantization levels.
    #[arg(long, default_value_t = 1.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let data = match args.kind {
        Kind::Mixture => gaussian_mixture(args.n, args.size, args.size, args.n_bits, args.noise, &mut rng),
        Kind::Checkerboard => checkerboards(args.n, args.size, args.size, args.n_bits, &mut rng),
    };
    let result = data.and_then(|t| mcwt::save(&t, &args.out));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(match e {
            macow::Error::Io(_) => 2,
            _ => 1,
        });
    }
}
