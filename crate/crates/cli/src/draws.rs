//! Binary file of thinned posterior draws.
//!
//! Layout, little-endian: the 8 magic bytes `rfdraws1`, then three `u64`
//! (number of draws, θ length, σ² length), then per draw a `u64` cycle
//! followed by the θ and σ² values as `f64`.

use std::io::{BufWriter, Write};
use std::path::Path;

use ricefield::sampler::Draws;

use crate::{io_err, CliError};

const MAGIC: &[u8; 8] = b"rfdraws1";

pub fn write_draws(draws: &Draws, path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let tl = draws.theta.first().map_or(0, Vec::len) as u64;
    let sl = draws.sigma2.first().map_or(0, Vec::len) as u64;
    let mut bytes = MAGIC.to_vec();
    for x in [draws.cycles.len() as u64, tl, sl] {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    for ((c, t), s) in draws.cycles.iter().zip(&draws.theta).zip(&draws.sigma2) {
        let mut buf = Vec::with_capacity(8 * (1 + t.len() + s.len()));
        buf.extend_from_slice(&c.to_le_bytes());
        for x in t.iter().chain(s) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_draws(path: &Path) -> Result<Draws, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| CliError::Usage(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a draws file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (n, tl, sl) = (word(8) as usize, word(16) as usize, word(24) as usize);
    let rec = 8 * (1 + tl + sl);
    if bytes.len() != 32 + n * rec {
        return Err(bad(&format!("expected {} bytes, found {}", 32 + n * rec, bytes.len())));
    }
    let mut out = Draws::default();
    for k in 0..n {
        let base = 32 + k * rec;
        out.cycles.push(word(base));
        let vals: Vec<f64> = (0..tl + sl).map(|i| f64::from_bits(word(base + 8 + 8 * i))).collect();
        out.theta.push(vals[..tl].to_vec());
        out.sigma2.push(vals[tl..].to_vec());
    }
    Ok(out)
}
