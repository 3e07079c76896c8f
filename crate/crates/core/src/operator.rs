//! Fourier neural operator used as the one-step predictor, and the `NODM`
//! named-blob model container.
//!
//! Fields enter as `[n]` or `[nx, ny]`. Inside the network every activation
//! is channel-first: `[C, n]` or `[C, nx, ny]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::Reader;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"NODM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FnoConfig {
    pub ndims: usize,
    pub width: usize,
    pub modes: usize,
    pub blocks: usize,
    /// Append normalized grid coordinates to the lifted input.
    pub coords: bool,
}

impl Default for FnoConfig {
    fn default() -> Self {
        FnoConfig {
            ndims: 1,
            width: 64,
            modes: 20,
            blocks: 4,
            coords: true,
        }
    }
}

impl FnoConfig {
    pub fn in_channels(&self) -> usize {
        1 + if self.coords { self.ndims } else { 0 }
    }
}

/// Pointwise affine map `[out, in]` plus `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, out: usize, inp: usize, gain: f64) -> Self {
        let bound = gain / (inp as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        Linear {
            weight: Arc::new(Tensor::new(vec![out, inp], draw(out * inp)).unwrap()),
            bias: Arc::new(Tensor::new(vec![out], draw(out)).unwrap()),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Arc::new(Tensor::zeros(&[out, inp])),
            bias: Arc::new(Tensor::zeros(&[out])),
        }
    }
}

/// Complex per-mode channel mixing weights `[width, width, modes…, 2]`.
/// In 2D the first mode axis holds `2k - 1` rows (frequencies `0..k` then
/// `-(k-1)..0`) and the second `k` columns, so the kept block is closed under
/// conjugation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConvParams {
    pub weight: Arc<Tensor>,
}

impl SpectralConvParams {
    pub fn modes(&self) -> usize {
        let s = self.weight.shape();
        s[s.len() - 2]
    }

    pub fn ndims(&self) -> usize {
        self.weight.shape().len() - 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnoBlockParams {
    pub w: Linear,
    pub conv: SpectralConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub lift: Linear,
    pub blocks: Vec<FnoBlockParams>,
    pub proj: Linear,
}

fn mode_shape(config: &FnoConfig) -> Vec<usize> {
    match config.ndims {
        1 => vec![config.modes],
        _ => vec![2 * config.modes - 1, config.modes],
    }
}

impl PredictorParams {
    pub fn init(config: &FnoConfig, seed: u64) -> Result<Self> {
        validate_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let lift = Linear::init(&mut rng, w, config.in_channels(), 1.0);
        let scale = 1.0 / (w * w) as f64;
        let mut wshape = vec![w, w];
        wshape.extend(mode_shape(config));
        wshape.push(2);
        let blocks = (0..config.blocks)
            .map(|_| {
                let n = wshape.iter().product();
                let data = (0..n).map(|_| scale * rng.random::<f64>()).collect();
                FnoBlockParams {
                    w: Linear::init(&mut rng, w, w, 1.0),
                    conv: SpectralConvParams {
                        weight: Arc::new(Tensor::new(wshape.clone(), data).unwrap()),
                    },
                }
            })
            .collect();
        // Small projection so the untrained residual step starts near persistence.
        let mut proj = Linear::init(&mut rng, 1, w, 0.01);
        proj.bias = Arc::new(Tensor::zeros(&[1]));
        Ok(PredictorParams { lift, blocks, proj })
    }

    pub fn zeros(config: &FnoConfig) -> Result<Self> {
        validate_config(config)?;
        let w = config.width;
        let mut wshape = vec![w, w];
        wshape.extend(mode_shape(config));
        wshape.push(2);
        Ok(PredictorParams {
            lift: Linear::zeros(w, config.in_channels()),
            blocks: (0..config.blocks)
                .map(|_| FnoBlockParams {
                    w: Linear::zeros(w, w),
                    conv: SpectralConvParams {
                        weight: Arc::new(Tensor::zeros(&wshape)),
                    },
                })
                .collect(),
            proj: Linear::zeros(1, w),
        })
    }

    /// Architecture recovered from tensor shapes.
    pub fn config(&self) -> FnoConfig {
        let conv = &self.blocks[0].conv;
        let ndims = conv.ndims();
        FnoConfig {
            ndims,
            width: self.lift.weight.shape()[0],
            modes: conv.modes(),
            blocks: self.blocks.len(),
            coords: self.lift.weight.shape()[1] > 1,
        }
    }

    /// Parameters in canonical order with their blob names.
    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            ("predictor.lift.weight".to_string(), &self.lift.weight),
            ("predictor.lift.bias".to_string(), &self.lift.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("predictor.block{i}.w.weight"), &b.w.weight));
            out.push((format!("predictor.block{i}.w.bias"), &b.w.bias));
            out.push((format!("predictor.block{i}.conv.weight"), &b.conv.weight));
        }
        out.push(("predictor.proj.weight".to_string(), &self.proj.weight));
        out.push(("predictor.proj.bias".to_string(), &self.proj.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.lift.weight, &mut self.lift.bias];
        for b in &mut self.blocks {
            out.push(&mut b.w.weight);
            out.push(&mut b.w.bias);
            out.push(&mut b.conv.weight);
        }
        out.push(&mut self.proj.weight);
        out.push(&mut self.proj.bias);
        out
    }

    pub fn from_named(blobs: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<Arc<Tensor>> {
            blobs
                .get(name)
                .cloned()
                .map(Arc::new)
                .ok_or_else(|| Error::Config(format!("model is missing blob {name}")))
        };
        let linear = |p: &str| -> Result<Linear> {
            Ok(Linear {
                weight: get(&format!("{p}.weight"))?,
                bias: get(&format!("{p}.bias"))?,
            })
        };
        let mut blocks = Vec::new();
        while blobs.contains_key(&format!("predictor.block{}.conv.weight", blocks.len())) {
            let i = blocks.len();
            blocks.push(FnoBlockParams {
                w: linear(&format!("predictor.block{i}.w"))?,
                conv: SpectralConvParams {
                    weight: get(&format!("predictor.block{i}.conv.weight"))?,
                },
            });
        }
        if blocks.is_empty() {
            return Err(Error::Config("model has no predictor blocks".into()));
        }
        let params = PredictorParams {
            lift: linear("predictor.lift")?,
            blocks,
            proj: linear("predictor.proj")?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let cfg = self.config();
        let reference = PredictorParams::zeros(&cfg)?;
        for ((name, a), (_, b)) in self.named().iter().zip(reference.named()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "blob {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Record every parameter on `tape`; `learnable` selects param vs constant leaves.
    pub fn bind(&self, tape: &mut Tape, learnable: bool) -> PredictorVars {
        let mut leaf = |t: &Arc<Tensor>| {
            if learnable {
                tape.param_shared(Arc::clone(t))
            } else {
                tape.constant_shared(Arc::clone(t))
            }
        };
        let lift = (leaf(&self.lift.weight), leaf(&self.lift.bias));
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                w: (leaf(&b.w.weight), leaf(&b.w.bias)),
                conv: leaf(&b.conv.weight),
            })
            .collect();
        let proj = (leaf(&self.proj.weight), leaf(&self.proj.bias));
        PredictorVars {
            lift,
            blocks,
            proj,
            config: self.config(),
        }
    }
}

fn validate_config(config: &FnoConfig) -> Result<()> {
    if !(1..=2).contains(&config.ndims) || config.width == 0 || config.modes == 0 || config.blocks == 0 {
        return Err(Error::Config(format!("unsupported operator configuration {config:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub w: (Var, Var),
    pub conv: Var,
}

/// Tape handles mirroring [`PredictorParams`].
#[derive(Clone, Debug)]
pub struct PredictorVars {
    pub lift: (Var, Var),
    pub blocks: Vec<BlockVars>,
    pub proj: (Var, Var),
    pub config: FnoConfig,
}

impl PredictorVars {
    /// Same order as [`PredictorParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.lift.0, self.lift.1];
        for b in &self.blocks {
            out.extend([b.w.0, b.w.1, b.conv]);
        }
        out.extend([self.proj.0, self.proj.1]);
        out
    }
}

/// Retained spectral indices per axis of the half spectrum of `spatial`.
pub fn mode_indices(spatial: &[usize], modes: usize) -> Result<Vec<Vec<usize>>> {
    if let Some(&n) = spatial.iter().find(|&&n| n < 2 * modes) {
        return Err(Error::InvalidArgument(format!(
            "{modes} retained modes need a grid of at least {} points per axis, got {n}",
            2 * modes
        )));
    }
    Ok(match spatial {
        [_] => vec![(0..modes).collect()],
        [nx, _] => vec![
            (0..modes).chain(nx - modes + 1..*nx).collect(),
            (0..modes).collect(),
        ],
        _ => return Err(Error::InvalidArgument(format!("unsupported spatial shape {spatial:?}"))),
    })
}

fn half_shape(spatial: &[usize]) -> Vec<usize> {
    let mut s = spatial.to_vec();
    let last = s.len() - 1;
    s[last] = s[last] / 2 + 1;
    s
}

/// `F⁻¹(R · F(v))` over the spatial axes of `v [C, spatial…]`.
pub fn spectral_conv(tape: &mut Tape, v: Var, weight: Var, modes: usize) -> Result<Var> {
    let spatial = tape.value(v).shape()[1..].to_vec();
    let keep = mode_indices(&spatial, modes)?;
    let spec = tape.rfft(v)?;
    let low = tape.select_modes(spec, &keep)?;
    let mixed = tape.mode_mix(low, weight)?;
    let padded = tape.pad_modes(mixed, &keep, &half_shape(&spatial))?;
    tape.irfft(padded, &spatial)
}

fn linear(tape: &mut Tape, v: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(w, v)?;
    tape.add_bias(y, b)
}

/// `σ(W v + b + F⁻¹(R · F(v)))`, with no activation on the last block.
pub fn fno_block(tape: &mut Tape, v: Var, block: &BlockVars, modes: usize, last: bool) -> Result<Var> {
    let local = linear(tape, v, block.w)?;
    let conv = spectral_conv(tape, v, block.conv, modes)?;
    let s = tape.add(local, conv)?;
    Ok(if last { s } else { tape.relu(s) })
}

/// Normalized coordinate channels `[ndims, spatial…]`, `x_j / L = j / n`.
pub fn coordinate_channels(spatial: &[usize]) -> Tensor {
    let size: usize = spatial.iter().product();
    let mut data = Vec::with_capacity(size * spatial.len());
    for axis in 0..spatial.len() {
        let inner: usize = spatial[axis + 1..].iter().product();
        for flat in 0..size {
            let j = (flat / inner) % spatial[axis];
            data.push(j as f64 / spatial[axis] as f64);
        }
    }
    let mut shape = vec![spatial.len()];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data).unwrap()
}

/// Residual prediction `ẑ_pred = ẑ + W(ẑ)` for a field `z` of shape `spatial`.
pub fn predictor_forward(tape: &mut Tape, pv: &PredictorVars, z: Var) -> Result<Var> {
    let spatial = tape.value(z).shape().to_vec();
    if spatial.len() != pv.config.ndims {
        return Err(Error::shape(
            "predict_step",
            format!("field {:?} for a {}-D operator", spatial, pv.config.ndims),
        ));
    }
    let mut chan_shape = vec![1];
    chan_shape.extend_from_slice(&spatial);
    let mut x = tape.reshape(z, &chan_shape)?;
    if pv.config.coords {
        let c = tape.constant(coordinate_channels(&spatial));
        x = tape.concat(&[x, c])?;
    }
    let mut v = linear(tape, x, pv.lift)?;
    let n = pv.blocks.len();
    for (i, b) in pv.blocks.iter().enumerate() {
        v = fno_block(tape, v, b, pv.config.modes, i + 1 == n)?;
    }
    let out = linear(tape, v, pv.proj)?;
    let out = tape.reshape(out, &spatial)?;
    tape.add(z, out)
}

/// One prediction step on plain data.
pub fn predict_step(params: &PredictorParams, z: &[f64], spatial: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let zv = tape.constant(Tensor::new(spatial.to_vec(), z.to_vec())?);
    let out = predictor_forward(&mut tape, &pv, zv)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn encode_model<'a>(blobs: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let blobs: Vec<_> = blobs.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&u32::try_from(blobs.len()).map_err(|_| Error::InvalidArgument("too many blobs".into()))?.to_le_bytes());
    for (name, t) in blobs {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("blob name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected NODM".into(),
        });
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported model version {version}"),
        });
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "blob name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let at = r.offset();
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Format {
                offset: at,
                message: format!("blob {name} of shape {shape:?} exceeds the file"),
            });
        }
        out.push((name, Tensor::new(shape, r.f64s(n)?)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

pub fn write_model<'a>(path: impl AsRef<Path>, blobs: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::write(path, encode_model(blobs)?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_model(&fs::read(path)?)
}
