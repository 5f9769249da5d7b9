//! Model serialization: a human-readable header followed by raw `f32`
//! little-endian parameters.
//!
//! ```text
//! muldef-net v1
//! id target
//! classes 10
//! input 28 28 1
//! layer conv2d 1 16 3 2 1
//! layer relu
//! layer dense 784 10 0
//! layer softmax
//! params 7850
//! end
//! <params * 4 bytes, layer order, weights then bias per layer>
//! ```
//!
//! Loading re-validates the architecture and checks the declared parameter
//! count against both the architecture and the payload length, so truncated
//! or inconsistent files fail with a specific message instead of producing a
//! silently broken model.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::network::Network;

const MAGIC: &str = "muldef-net";
const VERSION: u32 = 1;

fn layer_line(spec: &LayerSpec) -> String {
    match spec {
        LayerSpec::Dense {
            inputs,
            outputs,
            l2,
        } => format!("layer dense {inputs} {outputs} {l2}"),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => format!("layer conv2d {in_channels} {out_channels} {kernel} {stride} {padding}"),
        LayerSpec::Relu => "layer relu".to_string(),
        LayerSpec::MaxPool2d { window, stride } => format!("layer maxpool2d {window} {stride}"),
        LayerSpec::Dropout { keep } => format!("layer dropout {keep}"),
        LayerSpec::Flatten => "layer flatten".to_string(),
        LayerSpec::Softmax => "layer softmax".to_string(),
    }
}

/// Writes the network to `path`.
pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} v{VERSION}\n"));
    header.push_str(&format!("id {}\n", net.id()));
    header.push_str(&format!("classes {}\n", net.num_classes()));
    header.push_str("input");
    for d in net.input_shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    for spec in net.layers() {
        header.push_str(&layer_line(spec));
        header.push('\n');
    }
    header.push_str(&format!("params {}\n", net.param_count()));
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for i in 0..net.layers().len() {
        if let Some(p) = net.layer_params(i) {
            for v in p.weights.data().iter().chain(p.bias.data()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_usize(tok: Option<&str>, what: &str, path: &Path) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, format!("missing or invalid {what}")))
}

fn parse_f64(tok: Option<&str>, what: &str, path: &Path) -> Result<f64> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, format!("missing or invalid {what}")))
}

/// Reads a network written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;

    // Split the textual header (up to and including the `end` line) from the
    // binary payload.
    let mut offset = 0usize;
    let mut lines: Vec<String> = Vec::new();
    let mut found_end = false;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format(path, "header not terminated by an `end` line"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format(path, "header is not valid UTF-8"))?
            .to_string();
        offset += nl + 1;
        if line.trim() == "end" {
            found_end = true;
            break;
        }
        lines.push(line);
    }
    if !found_end {
        return Err(Error::format(
            path,
            "header not terminated by an `end` line",
        ));
    }

    let mut it = lines.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::format(path, "empty header"))?;
    let mut toks = first.split_whitespace();
    if toks.next() != Some(MAGIC) {
        return Err(Error::format(
            path,
            format!("bad magic line {first:?}, expected `{MAGIC} v{VERSION}`"),
        ));
    }
    match toks.next() {
        Some(v) if v == format!("v{VERSION}") => {}
        Some(v) => {
            return Err(Error::format(
                path,
                format!("unsupported format version {v}, this build reads v{VERSION}"),
            ));
        }
        None => return Err(Error::format(path, "magic line missing version")),
    }

    let mut id = None;
    let mut classes = None;
    let mut input_shape: Option<Vec<usize>> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut declared_params: Option<usize> = None;
    for line in it {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("id") => {
                id = Some(
                    line.trim_start()
                        .strip_prefix("id")
                        .unwrap_or("")
                        .trim()
                        .to_string(),
                );
            }
            Some("classes") => classes = Some(parse_usize(toks.next(), "class count", path)?),
            Some("input") => {
                let dims: std::result::Result<Vec<usize>, _> =
                    toks.map(|t| t.parse::<usize>()).collect();
                input_shape = Some(dims.map_err(|_| {
                    Error::format(path, format!("invalid input shape line {line:?}"))
                })?);
            }
            Some("layer") => {
                let kind = toks
                    .next()
                    .ok_or_else(|| Error::format(path, "layer line missing kind"))?;
                let spec = match kind {
                    "dense" => LayerSpec::Dense {
                        inputs: parse_usize(toks.next(), "dense inputs", path)?,
                        outputs: parse_usize(toks.next(), "dense outputs", path)?,
                        l2: parse_f64(toks.next(), "dense l2", path)?,
                    },
                    "conv2d" => LayerSpec::Conv2d {
                        in_channels: parse_usize(toks.next(), "conv in_channels", path)?,
                        out_channels: parse_usize(toks.next(), "conv out_channels", path)?,
                        kernel: parse_usize(toks.next(), "conv kernel", path)?,
                        stride: parse_usize(toks.next(), "conv stride", path)?,
                        padding: parse_usize(toks.next(), "conv padding", path)?,
                    },
                    "relu" => LayerSpec::Relu,
                    "maxpool2d" => LayerSpec::MaxPool2d {
                        window: parse_usize(toks.next(), "pool window", path)?,
                        stride: parse_usize(toks.next(), "pool stride", path)?,
                    },
                    "dropout" => LayerSpec::Dropout {
                        keep: parse_f64(toks.next(), "dropout keep", path)?,
                    },
                    "flatten" => LayerSpec::Flatten,
                    "softmax" => LayerSpec::Softmax,
                    other => {
                        return Err(Error::format(path, format!("unknown layer kind {other:?}")));
                    }
                };
                layers.push(spec);
            }
            Some("params") => {
                declared_params = Some(parse_usize(toks.next(), "param count", path)?);
            }
            Some(other) => {
                return Err(Error::format(
                    path,
                    format!("unknown header entry {other:?}"),
                ));
            }
            None => {}
        }
    }

    let id = id.ok_or_else(|| Error::format(path, "header missing `id`"))?;
    let classes = classes.ok_or_else(|| Error::format(path, "header missing `classes`"))?;
    let input_shape = input_shape.ok_or_else(|| Error::format(path, "header missing `input`"))?;
    let declared = declared_params.ok_or_else(|| Error::format(path, "header missing `params`"))?;

    let mut net = Network::<f32>::new(&id, input_shape, layers, 0)?;
    if net.num_classes() != classes {
        return Err(Error::format(
            path,
            format!(
                "header declares {classes} classes but the architecture produces {}",
                net.num_classes()
            ),
        ));
    }
    let implied = net.param_count();
    if declared != implied {
        return Err(Error::format(
            path,
            format!("header declares {declared} parameters but the architecture implies {implied}"),
        ));
    }
    let payload = &bytes[offset..];
    let expected_bytes = implied * 4;
    if payload.len() != expected_bytes {
        return Err(Error::format(
            path,
            format!(
                "parameter payload is {} bytes, expected {expected_bytes} ({implied} f32 values)",
                payload.len()
            ),
        ));
    }
    let mut cursor = 0usize;
    for i in 0..net.layers().len() {
        if let Some(p) = net.layer_params_mut(i) {
            for slot in p
                .weights
                .data_mut()
                .iter_mut()
                .chain(p.bias.data_mut().iter_mut())
            {
                let raw: [u8; 4] = payload[cursor..cursor + 4]
                    .try_into()
                    .expect("length checked above");
                *slot = f32::from_le_bytes(raw);
                cursor += 4;
            }
        }
    }
    Ok(net)
}
