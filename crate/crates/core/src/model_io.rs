//! JSON model files and IDX datasets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Images with an explicit trailing channel dimension.
pub const IDX_IMAGES_CHANNELS_MAGIC: u32 = 0x0000_0804;

const KNOWN_KINDS: [&str; 6] = ["dense", "conv2d", "relu", "maxpool2x2", "flatten", "softmax"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDesc {
    Dense {
        #[serde(rename = "in")]
        in_dim: usize,
        #[serde(rename = "out")]
        out_dim: usize,
        weights: Vec<Vec<f32>>,
        bias: Vec<f32>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<Vec<Vec<Vec<f32>>>>,
        bias: Vec<f32>,
    },
    Relu,
    Maxpool2x2,
    Flatten,
    Softmax,
}

#[derive(Deserialize)]
struct RawModel {
    format_version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<Value>,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::parse("model", e))?;
        if raw.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                "model",
                format!("unsupported format_version {}", raw.format_version),
            ));
        }
        let mut layers = Vec::with_capacity(raw.layers.len());
        for (i, value) in raw.layers.into_iter().enumerate() {
            let kind = value
                .get("kind")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::parse(format!("model layer {i}"), "missing `kind`"))?;
            if !KNOWN_KINDS.contains(&kind) {
                return Err(Error::UnknownLayer(kind.to_string()));
            }
            layers.push(serde_json::from_value(value).map_err(|e| Error::parse(format!("model layer {i}"), e))?);
        }
        Ok(ModelFile {
            format_version: raw.format_version,
            input_shape: raw.input_shape,
            class_count: raw.class_count,
            layers,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization is infallible")
    }

    /// Validates shapes and builds the runtime network.
    pub fn into_network(self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (index, desc) in self.layers.into_iter().enumerate() {
            let mismatch = |detail: String| Error::ShapeMismatch { layer: index, detail };
            layers.push(match desc {
                LayerDesc::Dense {
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                } => {
                    if weights.len() != out_dim || weights.iter().any(|r| r.len() != in_dim) || bias.len() != out_dim {
                        return Err(mismatch(format!(
                            "dense {in_dim}->{out_dim} weights/bias arrays have inconsistent lengths"
                        )));
                    }
                    Layer::Dense(Dense {
                        in_dim,
                        out_dim,
                        weights: tensor(vec![out_dim, in_dim], weights.concat(), index)?,
                        bias: tensor(vec![out_dim], bias, index)?,
                    })
                }
                LayerDesc::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weights,
                    bias,
                } => {
                    let consistent = weights.len() == out_channels
                        && weights.iter().all(|o| {
                            o.len() == in_channels
                                && o.iter().all(|i| i.len() == kernel && i.iter().all(|r| r.len() == kernel))
                        })
                        && bias.len() == out_channels;
                    if !consistent {
                        return Err(mismatch("conv2d weights/bias arrays have inconsistent lengths".into()));
                    }
                    let flat: Vec<f32> = weights.into_iter().flatten().flatten().flatten().collect();
                    Layer::Conv2d(Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        weights: tensor(vec![out_channels, in_channels, kernel, kernel], flat, index)?,
                        bias: tensor(vec![out_channels], bias, index)?,
                    })
                }
                LayerDesc::Relu => Layer::Relu,
                LayerDesc::Maxpool2x2 => Layer::MaxPool2x2,
                LayerDesc::Flatten => Layer::Flatten,
                LayerDesc::Softmax => Layer::Softmax,
            });
        }
        Network::new(self.input_shape, self.class_count, layers)
    }

    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense(d) => LayerDesc::Dense {
                    in_dim: d.in_dim,
                    out_dim: d.out_dim,
                    weights: d.weights.data().chunks(d.in_dim).map(<[f32]>::to_vec).collect(),
                    bias: d.bias.data().to_vec(),
                },
                Layer::Conv2d(c) => {
                    let k = c.kernel;
                    let w = c.weights.data();
                    let weights = (0..c.out_channels)
                        .map(|o| {
                            (0..c.in_channels)
                                .map(|i| {
                                    (0..k)
                                        .map(|y| {
                                            let start = ((o * c.in_channels + i) * k + y) * k;
                                            w[start..start + k].to_vec()
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                    LayerDesc::Conv2d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: k,
                        stride: c.stride,
                        weights,
                        bias: c.bias.data().to_vec(),
                    }
                }
                Layer::Relu => LayerDesc::Relu,
                Layer::MaxPool2x2 => LayerDesc::Maxpool2x2,
                Layer::Flatten => LayerDesc::Flatten,
                Layer::Softmax => LayerDesc::Softmax,
            })
            .collect();
        ModelFile {
            format_version: FORMAT_VERSION,
            input_shape: net.input_shape().to_vec(),
            class_count: net.class_count(),
            layers,
        }
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>, layer: usize) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| Error::ShapeMismatch {
        layer,
        detail: e.to_string(),
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_json(&text)?.into_network()
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = ModelFile::from_network(net).to_json();
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical model serialization.
pub fn model_fingerprint(net: &Network) -> String {
    hex::encode(Sha256::digest(ModelFile::from_network(net).to_json().as_bytes()))
}

/// An in-memory labelled image set, pixels as unsigned bytes in `H x W x C`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, dims: [usize; 3], pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let [height, width, channels] = dims;
        let stride = height * width * channels;
        if stride == 0 {
            return Err(Error::InvalidConfig(format!("image dimensions must be positive, got {dims:?}")));
        }
        if !pixels.len().is_multiple_of(stride) {
            return Err(Error::Truncated {
                expected: pixels.len().div_ceil(stride) * stride,
                found: pixels.len(),
            });
        }
        let images = pixels.len() / stride;
        if images != labels.len() {
            return Err(Error::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            name: name.into(),
            height,
            width,
            channels,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Image `index` normalized to `[0, 1]`, shaped `[H, W, C]`.
    pub fn image(&self, index: usize) -> Tensor {
        Tensor::from_bytes(self.dims().to_vec(), self.image_bytes(index)).expect("dims checked at construction")
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn check_labels(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l >= class_count) {
            Some(index) => Err(Error::LabelOutOfRange {
                index,
                label: self.labels[index],
                class_count,
            }),
            None => Ok(()),
        }
    }

    /// Subset by indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Appends another dataset with identical image dimensions.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dims() != self.dims() {
            return Err(Error::InvalidConfig(format!(
                "cannot concatenate {:?} images onto {:?}",
                other.dims(),
                self.dims()
            )));
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// SHA-256 over dimensions, pixels and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.dims() {
            h.update((d as u64).to_be_bytes());
        }
        h.update(&self.pixels);
        for &l in &self.labels {
            h.update((l as u64).to_be_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Quantizes `[0, 1]` pixels back to bytes.
pub fn to_bytes(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.bytes.get(self.pos..self.pos + 4).ok_or(Error::Truncated {
            expected: self.pos + 4,
            found: self.bytes.len(),
        })?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Truncated {
                expected: len,
                found: rest.len(),
            });
        }
        Ok(&rest[..len])
    }
}

/// Parses an IDX3 (`N x H x W`) or IDX4 (`N x H x W x C`) image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, [usize; 3], Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32()?;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES_CHANNELS_MAGIC => 4,
        found => {
            return Err(Error::BadMagic {
                found,
                expected: IDX_IMAGES_MAGIC,
            })
        }
    };
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = if rank == 4 { r.u32()? as usize } else { 1 };
    let payload = r.payload(n * h * w * c)?;
    Ok((n, [h, w, c], payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = r.u32()? as usize;
    Ok(r.payload(n)?.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_dataset(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, dims, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, dims, pixels, labels)
}

pub fn encode_idx_images(dataset: &Dataset) -> Vec<u8> {
    let [h, w, c] = dataset.dims();
    let mut out = Vec::with_capacity(20 + dataset.pixels.len());
    let magic = if c == 1 { IDX_IMAGES_MAGIC } else { IDX_IMAGES_CHANNELS_MAGIC };
    out.extend_from_slice(&magic.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    if c != 1 {
        out.extend_from_slice(&(c as u32).to_be_bytes());
    }
    out.extend_from_slice(&dataset.pixels);
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

pub fn save_dataset(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, encode_idx_images(dataset)).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(&dataset.labels)).map_err(|e| Error::io(labels_path, e))
}
