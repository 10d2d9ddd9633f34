//! Network checkpoints: a human-readable header that fully describes the
//! architecture, followed by every state tensor as little-endian bytes in a
//! fixed order. Loading rebuilds the network from the header and overwrites
//! its tensors, so a round trip is bitwise exact. Optimizer state is not
//! serialized — checkpoints resume evaluation, not a mid-run optimizer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Dense, Layer};
use crate::model::{parse_arch, Model, Network};
use crate::rng::{stream, substream};
use crate::samples::{EmbedMode, LabelEmbedding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

const MAGIC: &str = "dfwd-net";
const VERSION: u32 = 1;

fn dtype_name<T: Scalar>() -> &'static str {
    match std::mem::size_of::<T>() {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

/// Every persistent tensor with its stable name, in serialization order:
/// embedding table, then per-layer state, then the classification head.
fn state_tensors<T: Scalar>(net: &Network<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
    if let Some(emb) = &net.embedding {
        out.push(("embedding".into(), &emb.table.value));
    }
    for (i, layer) in net.model.layers.iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                out.push((format!("layer{i}.w"), &d.w.value));
                out.push((format!("layer{i}.b"), &d.b.value));
            }
            Layer::Conv2d(c) => {
                out.push((format!("layer{i}.w"), &c.w.value));
                out.push((format!("layer{i}.b"), &c.b.value));
            }
            Layer::BatchNorm(bn) => {
                out.push((format!("layer{i}.gamma"), &bn.gamma.value));
                out.push((format!("layer{i}.beta"), &bn.beta.value));
                out.push((format!("layer{i}.running_mean"), &bn.running_mean));
                out.push((format!("layer{i}.running_var"), &bn.running_var));
            }
            Layer::Relu | Layer::AvgPool(_) | Layer::Flatten => {}
        }
    }
    if let Some(head) = &net.head {
        out.push(("head.w".into(), &head.w.value));
        out.push(("head.b".into(), &head.b.value));
    }
    out
}

fn state_tensors_mut<T: Scalar>(net: &mut Network<T>) -> Vec<(String, &mut Tensor<T>)> {
    let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
    if let Some(emb) = &mut net.embedding {
        out.push(("embedding".into(), &mut emb.table.value));
    }
    for (i, layer) in net.model.layers.iter_mut().enumerate() {
        match layer {
            Layer::Dense(d) => {
                out.push((format!("layer{i}.w"), &mut d.w.value));
                out.push((format!("layer{i}.b"), &mut d.b.value));
            }
            Layer::Conv2d(c) => {
                out.push((format!("layer{i}.w"), &mut c.w.value));
                out.push((format!("layer{i}.b"), &mut c.b.value));
            }
            Layer::BatchNorm(bn) => {
                out.push((format!("layer{i}.gamma"), &mut bn.gamma.value));
                out.push((format!("layer{i}.beta"), &mut bn.beta.value));
                out.push((format!("layer{i}.running_mean"), &mut bn.running_mean));
                out.push((format!("layer{i}.running_var"), &mut bn.running_var));
            }
            Layer::Relu | Layer::AvgPool(_) | Layer::Flatten => {}
        }
    }
    if let Some(head) = &mut net.head {
        out.push(("head.w".into(), &mut head.w.value));
        out.push(("head.b".into(), &mut head.b.value));
    }
    out
}

fn write_payload<T: Scalar>(bytes: &mut Vec<u8>, t: &Tensor<T>) {
    match std::mem::size_of::<T>() {
        4 => {
            for v in t.data() {
                bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        _ => {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
}

fn read_payload<T: Scalar>(bytes: &[u8], t: &mut Tensor<T>) -> Result<usize> {
    let width = std::mem::size_of::<T>();
    let need = t.len() * width;
    if bytes.len() < need {
        return Err(Error::Parse {
            path: String::new(),
            offset: 0,
            what: format!("payload truncated: need {need} bytes, have {}", bytes.len()),
        });
    }
    match width {
        4 => {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let b = [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
                *v = T::from_f64(f32::from_le_bytes(b) as f64);
            }
        }
        _ => {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[8 * i..8 * i + 8]);
                *v = T::from_f64(f64::from_le_bytes(b));
            }
        }
    }
    Ok(need)
}

/// The raw image shape this network was built for (channel count before any
/// label channel is appended).
pub fn image_shape<T: Scalar>(net: &Network<T>) -> [usize; 3] {
    let c = net.model.input_shape[0];
    let h = net.model.input_shape[1];
    let w = net.model.input_shape[2];
    match &net.embedding {
        Some(e) if e.mode == EmbedMode::LearnableChannel => [c - 1, h, w],
        _ => [c, h, w],
    }
}

/// Serialize a network. Returns the sha256 hex digest of the payload,
/// which also appears in the header for integrity checking on load.
pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<String> {
    let tensors = state_tensors(net);
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        write_payload(&mut payload, t);
    }
    let digest = hex(&Sha256::digest(&payload));
    let arch: Vec<String> = net.model.specs.iter().map(|s| s.render()).collect();
    let [c, h, w] = image_shape(net);
    let embed = match &net.embedding {
        Some(e) => e.mode.name(),
        None => "none",
    };
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} v{VERSION}\n"));
    header.push_str(&format!("dtype {}\n", dtype_name::<T>()));
    header.push_str(&format!("arch {}\n", arch.join(",")));
    header.push_str(&format!("image_shape {c} {h} {w}\n"));
    header.push_str(&format!("num_classes {}\n", net.num_classes));
    header.push_str(&format!("embed {embed}\n"));
    header.push_str(&format!("head {}\n", u8::from(net.head.is_some())));
    header.push_str(&format!("tensors {}\n", tensors.len()));
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
    }
    header.push_str(&format!("sha256 {digest}\n"));
    header.push_str("payload\n");
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(digest)
}

struct Header {
    dtype: String,
    arch: String,
    image_shape: [usize; 3],
    num_classes: usize,
    embed: String,
    head: bool,
    tensors: Vec<(String, Vec<usize>)>,
    sha256: String,
}

fn parse_header(text: &str, path: &Path) -> Result<Header> {
    let perr = |what: String| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        what,
    };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| perr("empty checkpoint".into()))?;
    if first != format!("{MAGIC} v{VERSION}") {
        return Err(perr(format!("bad magic line '{first}'")));
    }
    let mut dtype = String::new();
    let mut arch = String::new();
    let mut image_shape = [0usize; 3];
    let mut num_classes = 0usize;
    let mut embed = String::new();
    let mut head = false;
    let mut expect_tensors = 0usize;
    let mut tensors = Vec::new();
    let mut sha256 = String::new();
    for line in lines {
        let Some((key, rest)) = line.split_once(' ').or(Some((line, ""))) else {
            unreachable!()
        };
        match key {
            "dtype" => dtype = rest.into(),
            "arch" => arch = rest.into(),
            "image_shape" => {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(format!("bad image_shape: {e}")))?;
                if dims.len() != 3 {
                    return Err(perr(format!("image_shape needs 3 dims, got {}", dims.len())));
                }
                image_shape.copy_from_slice(&dims);
            }
            "num_classes" => {
                num_classes =
                    rest.parse().map_err(|e| perr(format!("bad num_classes: {e}")))?
            }
            "embed" => embed = rest.into(),
            "head" => head = rest == "1",
            "tensors" => {
                expect_tensors =
                    rest.parse().map_err(|e| perr(format!("bad tensor count: {e}")))?
            }
            "tensor" => {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| perr("tensor line without a name".into()))?;
                let dims: Vec<usize> = parts
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(format!("bad tensor dims: {e}")))?;
                tensors.push((name.to_string(), dims));
            }
            "sha256" => sha256 = rest.into(),
            other => return Err(perr(format!("unknown header key '{other}'"))),
        }
    }
    if tensors.len() != expect_tensors {
        return Err(perr(format!(
            "header declares {expect_tensors} tensors but lists {}",
            tensors.len()
        )));
    }
    Ok(Header { dtype, arch, image_shape, num_classes, embed, head, tensors, sha256 })
}

/// Deserialize a network saved by [`save`].
pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = fs::read(path)?;
    let perr = |what: String| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        what,
    };
    let marker = b"\npayload\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| perr("no payload marker".into()))?;
    let header_text = std::str::from_utf8(&bytes[..split + 1])
        .map_err(|e| perr(format!("header is not UTF-8: {e}")))?;
    let payload = &bytes[split + marker.len()..];
    let h = parse_header(header_text, path)?;
    if h.dtype != dtype_name::<T>() {
        return Err(perr(format!(
            "checkpoint stores {} but {} was requested",
            h.dtype,
            dtype_name::<T>()
        )));
    }
    let digest = hex(&Sha256::digest(payload));
    if digest != h.sha256 {
        return Err(perr("payload checksum mismatch".into()));
    }

    // Rebuild the architecture; all freshly initialized values are
    // overwritten by the payload below.
    let mut rng = substream(0, stream::INIT);
    let specs = parse_arch(&h.arch)?;
    let [c, ih, iw] = h.image_shape;
    let embedding = match h.embed.as_str() {
        "none" => None,
        m => Some(LabelEmbedding::new(
            h.num_classes,
            ih,
            iw,
            EmbedMode::parse(m)?,
            &mut rng,
        )),
    };
    let in_c = match &embedding {
        Some(e) => e.encoded_channels(c),
        None => c,
    };
    let model = Model::build(specs, &[in_c, ih, iw], &mut rng)?;
    let head = if h.head {
        let flat: usize = model.output_shape.iter().product();
        Some(Dense::new(flat, h.num_classes, &mut rng))
    } else {
        None
    };
    let mut net = Network { model, embedding, head, num_classes: h.num_classes };

    let mut slots = state_tensors_mut(&mut net);
    if slots.len() != h.tensors.len() {
        return Err(perr(format!(
            "architecture has {} state tensors but checkpoint stores {}",
            slots.len(),
            h.tensors.len()
        )));
    }
    let mut cursor = payload;
    for ((name, dims), (slot_name, slot)) in h.tensors.iter().zip(slots.iter_mut()) {
        if name != slot_name || dims != slot.shape() {
            return Err(perr(format!(
                "tensor mismatch: checkpoint has {name} {dims:?}, network expects {slot_name} {:?}",
                slot.shape()
            )));
        }
        let used = read_payload(cursor, slot)?;
        cursor = &cursor[used..];
    }
    if !cursor.is_empty() {
        return Err(perr(format!("{} trailing payload bytes", cursor.len())));
    }
    Ok(net)
}

/// Hex sha256 of an arbitrary file (manifests record checkpoint hashes).
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::EmbedMode;
    use crate::train::{build_network, Strategy};

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("ckpt-{}-{name}", std::process::id()))
    }

    fn bits<T: Scalar>(net: &Network<T>) -> Vec<u64> {
        state_tensors(net)
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_f64().to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise_for_df_and_bp_networks() {
        for (strategy, embed) in [
            (Strategy::DfO { group_size: 2 }, EmbedMode::LearnableChannel),
            (Strategy::Greedy, EmbedMode::PixelReplace),
            (Strategy::Backprop, EmbedMode::LearnableChannel),
        ] {
            let arch = parse_arch("mlp(12,8)").unwrap();
            let net: Network<f32> =
                build_network(&arch, &[1, 5, 5], 4, &strategy, embed, 42).unwrap();
            let path = tmp(&format!("rt-{}", strategy.name()));
            let digest = save(&net, &path).unwrap();
            assert_eq!(digest.len(), 64);
            let back: Network<f32> = load(&path).unwrap();
            assert_eq!(bits(&net), bits(&back), "{}", strategy.name());
            assert_eq!(back.num_classes, 4);
            assert_eq!(back.head.is_some(), strategy == Strategy::Backprop);
            std::fs::remove_file(&path).unwrap();
        }
    }

    #[test]
    fn round_trip_preserves_conv_and_bn_state() {
        let arch = parse_arch("cnn(c3:4, p2, c3:6)").unwrap();
        let mut net: Network<f64> = build_network(
            &arch,
            &[1, 8, 8],
            4,
            &Strategy::Greedy,
            EmbedMode::LearnableChannel,
            7,
        )
        .unwrap();
        // make running stats non-trivial
        for layer in net.model.layers.iter_mut() {
            if let Layer::BatchNorm(bn) = layer {
                for (i, v) in bn.running_mean.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * (i as f64 + 1.0);
                }
            }
        }
        let path = tmp("conv");
        save(&net, &path).unwrap();
        let back: Network<f64> = load(&path).unwrap();
        assert_eq!(bits(&net), bits(&back));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn reload_preserves_decode_scores_exactly() {
        let arch = parse_arch("mlp(16,16)").unwrap();
        let net: Network<f32> = build_network(
            &arch,
            &[1, 6, 6],
            3,
            &Strategy::DfO { group_size: 2 },
            EmbedMode::LearnableChannel,
            5,
        )
        .unwrap();
        let images = {
            let mut rng = substream(9, stream::SHUFFLE);
            use rand::Rng;
            let data: Vec<f32> = (0..4 * 36).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::from_vec(&[4, 1, 6, 6], data).unwrap()
        };
        let cfg = crate::eval::DecodeConfig::default();
        let before = crate::eval::decode_scores(&net, &images, cfg).unwrap();
        let path = tmp("decode");
        save(&net, &path).unwrap();
        let back: Network<f32> = load(&path).unwrap();
        let after = crate::eval::decode_scores(&back, &images, cfg).unwrap();
        assert_eq!(before, after);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corruption_and_mismatches_are_rejected() {
        let arch = parse_arch("mlp(8)").unwrap();
        let net: Network<f32> = build_network(
            &arch,
            &[1, 4, 4],
            4,
            &Strategy::Greedy,
            EmbedMode::LearnableChannel,
            1,
        )
        .unwrap();
        let path = tmp("corrupt");
        save(&net, &path).unwrap();

        // flip one payload byte
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = load::<f32>(&path).err().expect("corrupted file").to_string();
        assert!(err.contains("checksum"), "{err}");

        // wrong dtype on an intact file
        save(&net, &path).unwrap();
        let err = load::<f64>(&path).err().expect("dtype mismatch").to_string();
        assert!(err.contains("f32"), "{err}");

        // bad magic
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
