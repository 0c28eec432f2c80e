//! Binary model checkpoints: network configuration, epoch counter, and every
//! named parameter/buffer stored as f64 for an exact f32/f64 round trip.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array4;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"BDCK";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint<F: Real>(path: &Path, model: &Model<F>, epoch: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| io_err(path, e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(werr)?;
    let cfg = &model.cfg;
    w.write_u32::<LittleEndian>(cfg.n_frames as u32).map_err(werr)?;
    w.write_u32::<LittleEndian>(cfg.c_agg as u32).map_err(werr)?;
    w.write_f64::<LittleEndian>(cfg.width_multiplier).map_err(werr)?;
    w.write_f64::<LittleEndian>(cfg.depth_multiplier).map_err(werr)?;
    w.write_f64::<LittleEndian>(cfg.bn_eps).map_err(werr)?;
    w.write_f64::<LittleEndian>(cfg.bn_momentum).map_err(werr)?;
    for v in cfg.base_widths {
        w.write_u32::<LittleEndian>(v as u32).map_err(werr)?;
    }
    for v in cfg.base_depths {
        w.write_u32::<LittleEndian>(v as u32).map_err(werr)?;
    }
    w.write_u32::<LittleEndian>(epoch as u32).map_err(werr)?;
    let entries = model.store.entries();
    w.write_u32::<LittleEndian>(entries.len() as u32).map_err(werr)?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(werr)?;
        w.write_all(name).map_err(werr)?;
        w.write_u8(e.trainable as u8).map_err(werr)?;
        let d = e.value.dim();
        for s in [d.0, d.1, d.2, d.3] {
            w.write_u32::<LittleEndian>(s as u32).map_err(werr)?;
        }
        for v in e.value.iter() {
            w.write_f64::<LittleEndian>(v.to_f64_()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model from the stored configuration.
/// `expect_n` rejects a mismatched window length up front.
pub fn load_checkpoint<F: Real>(path: &Path, expect_n: Option<usize>) -> Result<(Model<F>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let rerr = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".to_string()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(rerr)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n_frames = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    if let Some(n) = expect_n {
        if n != n_frames {
            return Err(Error::Config {
                field: "n".to_string(),
                message: format!("checkpoint was trained with n={n_frames}, requested n={n}"),
            });
        }
    }
    let c_agg = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let width_multiplier = r.read_f64::<LittleEndian>().map_err(rerr)?;
    let depth_multiplier = r.read_f64::<LittleEndian>().map_err(rerr)?;
    let bn_eps = r.read_f64::<LittleEndian>().map_err(rerr)?;
    let bn_momentum = r.read_f64::<LittleEndian>().map_err(rerr)?;
    let mut base_widths = [0usize; 5];
    for v in &mut base_widths {
        *v = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    }
    let mut base_depths = [0usize; 5];
    for v in &mut base_depths {
        *v = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    }
    let epoch = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let cfg = NetworkConfig {
        n_frames,
        c_agg,
        width_multiplier,
        depth_multiplier,
        base_widths,
        base_depths,
        bn_eps,
        bn_momentum,
    };
    let mut model = Model::<F>::new(cfg, 0);
    let count = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match model ({})",
            model.store.len()
        )));
    }
    for e in model.store.entries_mut() {
        let name_len = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(rerr)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".to_string()))?;
        if name != e.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: file has `{name}`, model expects `{}`",
                e.name
            )));
        }
        let trainable = r.read_u8().map_err(rerr)? != 0;
        if trainable != e.trainable {
            return Err(Error::Checkpoint(format!("trainable flag mismatch for `{name}`")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(rerr)? as usize;
        }
        let expected = e.value.dim();
        if dims != [expected.0, expected.1, expected.2, expected.3] {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(F::real(r.read_f64::<LittleEndian>().map_err(rerr)?));
        }
        e.value = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor payload: {e}")))?;
    }
    // anything left over means the file does not match the format
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Checkpoint("trailing bytes after parameters".to_string())),
        Err(e) => return Err(rerr(e)),
    }
    Ok((model, epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((1, 3 * n, h, w), |_| rng.gen::<f32>())
    }

    #[test]
    fn roundtrip_is_bit_exact_and_forward_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let model = Model::<f32>::new(NetworkConfig::tiny(3), 9);
        save_checkpoint(&path, &model, 7).unwrap();
        let (loaded, epoch) = load_checkpoint::<f32>(&path, Some(3)).unwrap();
        assert_eq!(epoch, 7);
        for (a, b) in model.store.entries().iter().zip(loaded.store.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let x = rand_input(3, 64, 32, 3);
        let before = model.forward(x.clone(), false).unwrap().outputs();
        let after = loaded.forward(x, false).unwrap().outputs();
        assert_eq!(before.conf, after.conf);
        assert_eq!(before.reg, after.reg);
    }

    #[test]
    fn mismatched_n_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let model = Model::<f32>::new(NetworkConfig::tiny(3), 0);
        save_checkpoint(&path, &model, 0).unwrap();
        let err = match load_checkpoint::<f32>(&path, Some(5)) {
            Err(e) => e,
            Ok(_) => panic!("expected config error"),
        };
        match err {
            Error::Config { field, .. } => assert_eq!(field, "n"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn corrupt_file_is_checked_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let model = Model::<f32>::new(NetworkConfig::tiny(3), 0);
        save_checkpoint(&path, &model, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, None),
            Err(Error::Checkpoint(_))
        ));
        // make sure garbage magic is also rejected
        std::fs::write(&path, b"GARBAGE!").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, None),
            Err(Error::Checkpoint(_))
        ));
    }
}
