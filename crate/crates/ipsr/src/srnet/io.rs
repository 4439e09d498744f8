//! Weight files. Magic "IPSR", version u16, architecture header
//! (C, B, r, flags), then per-layer little-endian f32 blobs; the
//! quantized variant stores per-tensor (scale f32, zero_point u8)
//! records, u8 weight blobs, and i32 folded biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::net::{NetworkSpec, Weights};
use super::quant::{QuantParams, QuantizedLayer, QuantizedNetwork};
use super::SrnetError;

const MAGIC: &[u8; 4] = b"IPSR";
const VERSION: u16 = 1;
const FLAG_QUANTIZED: u8 = 0b0000_0001;
const FLAG_ANCHOR: u8 = 0b0000_0010;

pub enum LoadedNetwork {
    Float(Weights),
    Quantized(QuantizedNetwork),
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<(), SrnetError> {
        self.w.write_all(&[v]).map_err(SrnetError::Unwritable)
    }
    fn u16(&mut self, v: u16) -> Result<(), SrnetError> {
        self.w.write_all(&v.to_le_bytes()).map_err(SrnetError::Unwritable)
    }
    fn f32(&mut self, v: f32) -> Result<(), SrnetError> {
        self.w.write_all(&v.to_le_bytes()).map_err(SrnetError::Unwritable)
    }
    fn i32(&mut self, v: i32) -> Result<(), SrnetError> {
        self.w.write_all(&v.to_le_bytes()).map_err(SrnetError::Unwritable)
    }
    fn bytes(&mut self, v: &[u8]) -> Result<(), SrnetError> {
        self.w.write_all(v).map_err(SrnetError::Unwritable)
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), SrnetError> {
        self.r
            .read_exact(buf)
            .map_err(|_| SrnetError::Corrupt(format!("unexpected end of file reading {what}")))
    }
    fn u8(&mut self, what: &str) -> Result<u8, SrnetError> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, SrnetError> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }
    fn f32(&mut self, what: &str) -> Result<f32, SrnetError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
    fn i32(&mut self, what: &str) -> Result<i32, SrnetError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(i32::from_le_bytes(b))
    }
    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, SrnetError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32(what)? as f64);
        }
        Ok(out)
    }
    fn u8_vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>, SrnetError> {
        let mut buf = vec![0u8; n];
        self.exact(&mut buf, what)?;
        Ok(buf)
    }
    fn qparams(&mut self, what: &str) -> Result<QuantParams, SrnetError> {
        let scale = self.f32(what)? as f64;
        let zp = self.u8(what)?;
        if scale <= 0.0 {
            return Err(SrnetError::Corrupt(format!("non-positive scale in {what}")));
        }
        Ok(QuantParams {
            scale,
            zero_point: zp,
        })
    }
}

fn write_header<W: Write>(
    w: &mut Writer<W>,
    spec: &NetworkSpec,
    quantized: bool,
) -> Result<(), SrnetError> {
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    let mut flags = 0u8;
    if quantized {
        flags |= FLAG_QUANTIZED;
    }
    if spec.anchor {
        flags |= FLAG_ANCHOR;
    }
    w.u8(flags)?;
    w.u16(spec.channels as u16)?;
    w.u16(spec.body as u16)?;
    w.u8(spec.scale as u8)?;
    Ok(())
}

pub fn save_weights(w: &Weights, path: &Path) -> Result<(), SrnetError> {
    let file = File::create(path).map_err(SrnetError::Unwritable)?;
    let mut out = Writer {
        w: BufWriter::new(file),
    };
    write_header(&mut out, &w.spec, false)?;
    for layer in w.layers() {
        for &v in &layer.weights {
            out.f32(v as f32)?;
        }
        for &v in &layer.bias {
            out.f32(v as f32)?;
        }
    }
    out.w.flush().map_err(SrnetError::Unwritable)
}

pub fn save_quantized(q: &QuantizedNetwork, path: &Path) -> Result<(), SrnetError> {
    let file = File::create(path).map_err(SrnetError::Unwritable)?;
    let mut out = Writer {
        w: BufWriter::new(file),
    };
    write_header(&mut out, &q.spec, true)?;
    let write_qp = |out: &mut Writer<_>, qp: &QuantParams| -> Result<(), SrnetError> {
        out.f32(qp.scale as f32)?;
        out.u8(qp.zero_point)
    };
    write_qp(&mut out, &q.input_qp)?;
    write_qp(&mut out, &q.head_qp)?;
    for (_, aqp) in &q.body {
        write_qp(&mut out, aqp)?;
    }
    write_qp(&mut out, &q.skip_qp)?;
    write_qp(&mut out, &q.out_qp)?;
    let layers: Vec<&QuantizedLayer> = std::iter::once(&q.head)
        .chain(q.body.iter().map(|(l, _)| l))
        .chain(std::iter::once(&q.tail))
        .collect();
    for layer in layers {
        write_qp(&mut out, &layer.w_qp)?;
        out.bytes(&layer.weights)?;
        for &b in &layer.bias_q {
            out.i32(b)?;
        }
    }
    out.w.flush().map_err(SrnetError::Unwritable)
}

fn layer_dims(spec: &NetworkSpec, index: usize) -> (usize, usize) {
    let c = spec.channels;
    if index == 0 {
        (3, c)
    } else if index <= spec.body {
        (c, c)
    } else {
        (c, 3 * spec.scale * spec.scale)
    }
}

pub fn load_weights(path: &Path) -> Result<LoadedNetwork, SrnetError> {
    let file = File::open(path).map_err(SrnetError::Unreadable)?;
    let mut r = Reader {
        r: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(SrnetError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(SrnetError::BadVersion(version));
    }
    let flags = r.u8("flags")?;
    let channels = r.u16("channels")? as usize;
    let body = r.u16("body")? as usize;
    let scale = r.u8("scale")? as usize;
    if channels == 0 || scale == 0 {
        return Err(SrnetError::Corrupt("zero channels or scale".into()));
    }
    let spec = NetworkSpec {
        channels,
        body,
        scale,
        anchor: flags & FLAG_ANCHOR != 0,
    };
    let n_layers = body + 2;

    if flags & FLAG_QUANTIZED == 0 {
        let mut w = Weights::zeros(spec);
        for (i, layer) in w.layers_mut().into_iter().enumerate() {
            let what = format!("layer {i} weights");
            layer.weights = r.f32_vec(layer.weights.len(), &what)?;
            layer.bias = r.f32_vec(layer.bias.len(), &format!("layer {i} bias"))?;
        }
        // reject trailing garbage
        let mut extra = [0u8; 1];
        if r.r.read(&mut extra).map_err(SrnetError::Unreadable)? != 0 {
            return Err(SrnetError::Corrupt("trailing bytes after weights".into()));
        }
        Ok(LoadedNetwork::Float(w))
    } else {
        let input_qp = r.qparams("input qparams")?;
        let head_qp = r.qparams("head qparams")?;
        let mut body_qps = Vec::with_capacity(body);
        for i in 0..body {
            body_qps.push(r.qparams(&format!("body {i} qparams"))?);
        }
        let skip_qp = r.qparams("skip qparams")?;
        let out_qp = r.qparams("output qparams")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (c_in, c_out) = layer_dims(&spec, i);
            let w_qp = r.qparams(&format!("layer {i} weight qparams"))?;
            let weights = r.u8_vec(c_out * c_in * 9, &format!("layer {i} weights"))?;
            let mut bias_q = Vec::with_capacity(c_out);
            for _ in 0..c_out {
                bias_q.push(r.i32(&format!("layer {i} bias"))?);
            }
            layers.push(QuantizedLayer {
                c_in,
                c_out,
                k: 3,
                weights,
                w_qp,
                bias_q,
            });
        }
        let mut extra = [0u8; 1];
        if r.r.read(&mut extra).map_err(SrnetError::Unreadable)? != 0 {
            return Err(SrnetError::Corrupt("trailing bytes after weights".into()));
        }
        let mut it = layers.into_iter();
        let head = it.next().expect("head layer");
        let mut body_layers = Vec::with_capacity(body);
        for qp in body_qps {
            body_layers.push((it.next().expect("body layer"), qp));
        }
        let tail = it.next().expect("tail layer");
        Ok(LoadedNetwork::Quantized(QuantizedNetwork {
            spec,
            input_qp,
            head,
            head_qp,
            body: body_layers,
            skip_qp,
            tail,
            out_qp,
        }))
    }
}

/// Convenience: require a float network at `path`.
pub fn load_float(path: &Path) -> Result<Weights, SrnetError> {
    match load_weights(path)? {
        LoadedNetwork::Float(w) => Ok(w),
        LoadedNetwork::Quantized(_) => Err(SrnetError::Corrupt(
            "expected float weights, found quantized network".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::net::build_network;
    use super::super::quant::calibrate_and_quantize;
    use super::super::tensor::Tensor;

    fn demo_weights() -> Weights {
        Weights::init(build_network(6, 2, 2, true).unwrap(), 77)
    }

    #[test]
    fn float_round_trip_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ipsr");
        let p2 = dir.path().join("b.ipsr");
        let w = demo_weights();
        save_weights(&w, &p1).unwrap();
        let loaded = match load_weights(&p1).unwrap() {
            LoadedNetwork::Float(w) => w,
            _ => panic!("expected float"),
        };
        assert_eq!(loaded.spec, w.spec);
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn quantized_round_trip_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("q.ipsr");
        let p2 = dir.path().join("q2.ipsr");
        let w = demo_weights();
        let calib = vec![Tensor::new(1, 3, 8, 8, (0..192).map(|i| i as f64 / 192.0).collect())];
        let q = calibrate_and_quantize(&w, &calib).unwrap();
        save_quantized(&q, &p1).unwrap();
        let loaded = match load_weights(&p1).unwrap() {
            LoadedNetwork::Quantized(q) => q,
            _ => panic!("expected quantized"),
        };
        save_quantized(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // the reload preserves behavior, not just bytes
        let again = match load_weights(&p2).unwrap() {
            LoadedNetwork::Quantized(q) => q,
            _ => panic!("expected quantized"),
        };
        let x = Tensor::new(1, 3, 8, 8, vec![0.25; 192]);
        assert_eq!(
            again.forward(&x).unwrap().data,
            loaded.forward(&x).unwrap().data
        );
    }

    #[test]
    fn header_flag_distinguishes_variants() {
        let dir = tempfile::tempdir().unwrap();
        let pf = dir.path().join("f.ipsr");
        let w = demo_weights();
        save_weights(&w, &pf).unwrap();
        assert!(matches!(load_weights(&pf).unwrap(), LoadedNetwork::Float(_)));
        let pq = dir.path().join("q.ipsr");
        let calib = vec![Tensor::zeros(1, 3, 8, 8)];
        let q = calibrate_and_quantize(&w, &calib).unwrap();
        save_quantized(&q, &pq).unwrap();
        assert!(matches!(
            load_weights(&pq).unwrap(),
            LoadedNetwork::Quantized(_)
        ));
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ipsr");
        let w = demo_weights();
        save_weights(&w, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [3, 6, 9, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_weights(&p), Err(SrnetError::Corrupt(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ipsr");
        std::fs::write(&p, b"NOPE\x01\x00rest").unwrap();
        assert!(matches!(load_weights(&p), Err(SrnetError::BadMagic)));
        let mut good = Vec::new();
        good.extend_from_slice(b"IPSR");
        good.extend_from_slice(&9u16.to_le_bytes());
        good.push(0);
        std::fs::write(&p, &good).unwrap();
        assert!(matches!(load_weights(&p), Err(SrnetError::BadVersion(9))));
    }
}
