//! Fusion encoder, decoupled decoders and their exact backward pass.

use ndarray::{concatenate, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::cbam::{Cbam, CbamCache};
use super::layers::{dropout_mask, gelu_backward, gelu_forward, LayerNorm, LayerNormCache, Linear};
use crate::error::{arg_err, shape_err, MafrError, Result};
use crate::feature_store::Modality;
use crate::scalar::Scalar;
use crate::seed;

/// Widths and switches describing the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub d_2d: usize,
    pub d_3d: usize,
    pub fused: usize,
    /// `[d_2d + d_3d, .., fused]`.
    pub encoder_widths: Vec<usize>,
    /// `[fused, .., d_2d]`.
    pub decoder_2d_widths: Vec<usize>,
    /// `[fused, .., d_3d]`.
    pub decoder_3d_widths: Vec<usize>,
    pub dropout_p: f64,
    pub skip: bool,
    pub cbam: bool,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
}

pub const DEFAULT_D_2D: usize = 768;
pub const DEFAULT_D_3D: usize = 1152;
pub const DEFAULT_FUSED: usize = 968;
pub const LAYERS_PER_STACK: usize = 3;

/// Widths `from → to` over [`LAYERS_PER_STACK`] layers by linear interpolation.
pub fn ramp(from: usize, to: usize) -> Vec<usize> {
    (0..=LAYERS_PER_STACK)
        .map(|i| {
            let t = i as f64 / LAYERS_PER_STACK as f64;
            ((from as f64) + (to as f64 - from as f64) * t).round().max(1.0) as usize
        })
        .collect()
}

impl Architecture {
    /// Standard layout for the given feature dims. The full-size dims use the reference
    /// hidden widths; any other dims get linear ramps.
    pub fn new(d_2d: usize, d_3d: usize, fused: usize) -> Self {
        let full = (d_2d, d_3d, fused) == (DEFAULT_D_2D, DEFAULT_D_3D, DEFAULT_FUSED);
        let (encoder_widths, decoder_2d_widths, decoder_3d_widths) = if full {
            (
                vec![1920, 1536, 1152, 968],
                vec![968, 904, 840, 768],
                vec![968, 1032, 1096, 1152],
            )
        } else {
            (ramp(d_2d + d_3d, fused), ramp(fused, d_2d), ramp(fused, d_3d))
        };
        Self {
            d_2d,
            d_3d,
            fused,
            encoder_widths,
            decoder_2d_widths,
            decoder_3d_widths,
            dropout_p: 0.1,
            skip: true,
            cbam: true,
            cbam_reduction: 16,
            spatial_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_2d == 0 || self.d_3d == 0 || self.fused == 0 {
            return Err(arg_err!("model dims must be positive"));
        }
        let check = |name: &str, w: &[usize], from: usize, to: usize| -> Result<()> {
            if w.len() < 2 || w.contains(&0) {
                return Err(arg_err!("{name} needs at least two positive widths"));
            }
            if w[0] != from || *w.last().unwrap() != to {
                return Err(arg_err!("{name} must run {from} → {to}, got {w:?}"));
            }
            Ok(())
        };
        check("encoder_widths", &self.encoder_widths, self.d_2d + self.d_3d, self.fused)?;
        check("decoder_2d_widths", &self.decoder_2d_widths, self.fused, self.d_2d)?;
        check("decoder_3d_widths", &self.decoder_3d_widths, self.fused, self.d_3d)?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(arg_err!("dropout_p must lie in [0, 1)"));
        }
        if self.spatial_kernel.is_multiple_of(2) || self.cbam_reduction == 0 {
            return Err(arg_err!("spatial_kernel must be odd and cbam_reduction positive"));
        }
        Ok(())
    }

    pub fn modality_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::TwoD => self.d_2d,
            Modality::ThreeD => self.d_3d,
        }
    }
}

/// Linear layers where every layer but the last is followed by GELU, layer norm and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack<T> {
    pub linears: Vec<Linear<T>>,
    pub norms: Vec<LayerNorm<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub stack: LayerStack<T>,
    pub skip: Option<Linear<T>>,
    pub cbam: Option<Cbam<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub init_seed: u64,
    pub encoder: LayerStack<T>,
    pub decoder_2d: Decoder<T>,
    pub decoder_3d: Decoder<T>,
}

/// One gradient tensor per parameter tensor, laid out exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T>(pub ModelParams<T>);

type Views<'a, T> = Vec<(String, ArrayViewD<'a, T>)>;
type ViewsMut<'a, T> = Vec<(String, ArrayViewMutD<'a, T>)>;

impl<T: Scalar> LayerStack<T> {
    fn init(rng: &mut impl rand::Rng, widths: &[usize]) -> Self {
        let linears: Vec<Linear<T>> = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        let norms = widths[1..widths.len() - 1].iter().map(|&w| LayerNorm::new(w)).collect();
        Self { linears, norms }
    }

    fn zeros_like(&self) -> Self {
        Self {
            linears: self.linears.iter().map(|l| Linear::zeros(l.fan_in(), l.fan_out())).collect(),
            norms: self.norms.iter().map(|n| LayerNorm::zeros(n.gamma.len())).collect(),
        }
    }

    fn cast<U: Scalar>(&self) -> LayerStack<U> {
        LayerStack {
            linears: self.linears.iter().map(Linear::cast).collect(),
            norms: self.norms.iter().map(LayerNorm::cast).collect(),
        }
    }

    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        for (i, l) in self.linears.iter().enumerate() {
            out.push((format!("{prefix}.linear{i}.weight"), l.weight.view().into_dyn()));
            out.push((format!("{prefix}.linear{i}.bias"), l.bias.view().into_dyn()));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("{prefix}.norm{i}.gamma"), n.gamma.view().into_dyn()));
            out.push((format!("{prefix}.norm{i}.beta"), n.beta.view().into_dyn()));
        }
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        for (i, l) in self.linears.iter_mut().enumerate() {
            out.push((format!("{prefix}.linear{i}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("{prefix}.linear{i}.bias"), l.bias.view_mut().into_dyn()));
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            out.push((format!("{prefix}.norm{i}.gamma"), n.gamma.view_mut().into_dyn()));
            out.push((format!("{prefix}.norm{i}.beta"), n.beta.view_mut().into_dyn()));
        }
    }
}

impl<T: Scalar> Decoder<T> {
    fn init(rng: &mut impl rand::Rng, arch: &Architecture, widths: &[usize]) -> Self {
        let stack = LayerStack::init(rng, widths);
        let (input, output) = (widths[0], *widths.last().unwrap());
        let skip = arch.skip.then(|| Linear::init(rng, input, output));
        let cbam = arch
            .cbam
            .then(|| Cbam::init(rng, output, arch.cbam_reduction, arch.spatial_kernel));
        Self { stack, skip, cbam }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stack: self.stack.zeros_like(),
            skip: self.skip.as_ref().map(|l| Linear::zeros(l.fan_in(), l.fan_out())),
            cbam: self.cbam.as_ref().map(Cbam::zeros_like),
        }
    }

    fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            stack: self.stack.cast(),
            skip: self.skip.as_ref().map(Linear::cast),
            cbam: self.cbam.as_ref().map(Cbam::cast),
        }
    }

    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        self.stack.views(prefix, out);
        if let Some(s) = &self.skip {
            out.push((format!("{prefix}.skip.weight"), s.weight.view().into_dyn()));
            out.push((format!("{prefix}.skip.bias"), s.bias.view().into_dyn()));
        }
        if let Some(c) = &self.cbam {
            out.push((format!("{prefix}.cbam.fc1.weight"), c.fc1.weight.view().into_dyn()));
            out.push((format!("{prefix}.cbam.fc1.bias"), c.fc1.bias.view().into_dyn()));
            out.push((format!("{prefix}.cbam.fc2.weight"), c.fc2.weight.view().into_dyn()));
            out.push((format!("{prefix}.cbam.fc2.bias"), c.fc2.bias.view().into_dyn()));
            out.push((format!("{prefix}.cbam.conv.weight"), c.conv_weight.view().into_dyn()));
            out.push((format!("{prefix}.cbam.conv.bias"), c.conv_bias.view().into_dyn()));
        }
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        self.stack.views_mut(prefix, out);
        if let Some(s) = &mut self.skip {
            out.push((format!("{prefix}.skip.weight"), s.weight.view_mut().into_dyn()));
            out.push((format!("{prefix}.skip.bias"), s.bias.view_mut().into_dyn()));
        }
        if let Some(c) = &mut self.cbam {
            out.push((format!("{prefix}.cbam.fc1.weight"), c.fc1.weight.view_mut().into_dyn()));
            out.push((format!("{prefix}.cbam.fc1.bias"), c.fc1.bias.view_mut().into_dyn()));
            out.push((format!("{prefix}.cbam.fc2.weight"), c.fc2.weight.view_mut().into_dyn()));
            out.push((format!("{prefix}.cbam.fc2.bias"), c.fc2.bias.view_mut().into_dyn()));
            out.push((format!("{prefix}.cbam.conv.weight"), c.conv_weight.view_mut().into_dyn()));
            out.push((format!("{prefix}.cbam.conv.bias"), c.conv_bias.view_mut().into_dyn()));
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed::derive(seed, seed::ROLE_INIT));
        let encoder = LayerStack::init(&mut rng, &arch.encoder_widths);
        let decoder_2d = Decoder::init(&mut rng, arch, &arch.decoder_2d_widths);
        let decoder_3d = Decoder::init(&mut rng, arch, &arch.decoder_3d_widths);
        Ok(Self {
            arch: arch.clone(),
            init_seed: seed,
            encoder,
            decoder_2d,
            decoder_3d,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            encoder: self.encoder.zeros_like(),
            decoder_2d: self.decoder_2d.zeros_like(),
            decoder_3d: self.decoder_3d.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            encoder: self.encoder.cast(),
            decoder_2d: self.decoder_2d.cast(),
            decoder_3d: self.decoder_3d.cast(),
        }
    }

    /// Named views of every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Views<'_, T> {
        let mut out = Vec::new();
        self.encoder.views("encoder", &mut out);
        self.decoder_2d.views("decoder_2d", &mut out);
        self.decoder_3d.views("decoder_3d", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> ViewsMut<'_, T> {
        let mut out = Vec::new();
        self.encoder.views_mut("encoder", &mut out);
        self.decoder_2d.views_mut("decoder_2d", &mut out);
        self.decoder_3d.views_mut("decoder_3d", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a digest of every parameter value, used to detect stale forward caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (_, t) in self.tensors() {
            eat(t.len() as u64);
            for v in t.iter() {
                eat(v.to_f64_lossy().to_bits());
            }
        }
        h
    }

    fn decoder(&self, modality: Modality) -> &Decoder<T> {
        match modality {
            Modality::TwoD => &self.decoder_2d,
            Modality::ThreeD => &self.decoder_3d,
        }
    }
}

/// Convenience initializer with the standard layout for the given dims.
pub fn init_params(d_2d: usize, d_3d: usize, fused: usize, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(&Architecture::new(d_2d, d_3d, fused), seed)
}

impl<T: Scalar> GradientBundle<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        GradientBundle(params.zeros_like())
    }

    pub fn tensors(&self) -> Views<'_, T> {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> ViewsMut<'_, T> {
        self.0.tensors_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| *v == T::zero()))
    }

    pub fn add_assign(&mut self, other: &GradientBundle<T>) -> Result<()> {
        let theirs = other.tensors();
        let mut mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(shape_err!("gradient bundles differ in tensor count"));
        }
        for ((name, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            if a.shape() != b.shape() {
                return Err(shape_err!("gradient {name} shape mismatch"));
            }
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }
}

/// Dropout masks drawn during a training forward, one slot per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub encoder: Vec<Option<Array2<T>>>,
    pub decoder_2d: Vec<Option<Array2<T>>>,
    pub decoder_3d: Vec<Option<Array2<T>>>,
}

/// How dropout behaves during a forward pass.
pub enum Mode<'a, T> {
    Eval,
    /// Fresh masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
    /// Reuse masks recorded by an earlier training forward.
    Replay(&'a DropoutMasks<T>),
}

impl<T> Mode<'_, T> {
    pub fn is_eval(&self) -> bool {
        matches!(self, Mode::Eval)
    }
}

enum MaskSource<'a, 'r, T> {
    Off,
    Draw(&'r mut dyn RngCore, f64),
    Replay(&'a [Option<Array2<T>>]),
}

#[derive(Debug, Clone)]
struct StackCache<T> {
    inputs: Vec<Array2<T>>,
    pre_act: Vec<Array2<T>>,
    norms: Vec<LayerNormCache<T>>,
    masks: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> LayerStack<T> {
    fn forward(&self, x: Array2<T>, mut masks: MaskSource<'_, '_, T>) -> Result<(Array2<T>, StackCache<T>)> {
        let last = self.linears.len() - 1;
        let mut cache = StackCache {
            inputs: Vec::with_capacity(self.linears.len()),
            pre_act: Vec::with_capacity(last),
            norms: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut x = x;
        for (i, lin) in self.linears.iter().enumerate() {
            let z = lin.forward(x.view());
            cache.inputs.push(x);
            if i == last {
                return Ok((z, cache));
            }
            let a = gelu_forward(z.view());
            let (mut y, ln_cache) = self.norms[i].forward(a.view());
            let mask = match &mut masks {
                MaskSource::Off => None,
                MaskSource::Draw(rng, p) => (*p > 0.0).then(|| dropout_mask(&mut **rng, y.dim(), *p)),
                MaskSource::Replay(saved) => {
                    let m = saved
                        .get(i)
                        .ok_or_else(|| MafrError::InvalidArgument("replayed dropout masks too short".into()))?
                        .clone();
                    if let Some(m) = &m {
                        if m.dim() != y.dim() {
                            return Err(shape_err!("replayed dropout mask {:?} vs {:?}", m.dim(), y.dim()));
                        }
                    }
                    m
                }
            };
            if let Some(m) = &mask {
                y *= m;
            }
            cache.pre_act.push(z);
            cache.norms.push(ln_cache);
            cache.masks.push(mask);
            x = y;
        }
        unreachable!("stack has at least one layer")
    }

    fn backward(&self, cache: &StackCache<T>, dy: Array2<T>, grad: &mut LayerStack<T>) -> Array2<T> {
        let last = self.linears.len() - 1;
        let mut d = self.linears[last].backward(cache.inputs[last].view(), dy.view(), &mut grad.linears[last]);
        for i in (0..last).rev() {
            if let Some(m) = &cache.masks[i] {
                d *= m;
            }
            d = self.norms[i].backward(&cache.norms[i], d.view(), &mut grad.norms[i]);
            d = gelu_backward(cache.pre_act[i].view(), d.view());
            d = self.linears[i].backward(cache.inputs[i].view(), d.view(), &mut grad.linears[i]);
        }
        d
    }
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    stack: StackCache<T>,
    pre_cbam: Array2<T>,
    cbam: Option<CbamCache<T>>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    fingerprint: u64,
    height: usize,
    width: usize,
    encoder: StackCache<T>,
    fused: Array2<T>,
    decoder_2d: DecoderCache<T>,
    decoder_3d: DecoderCache<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn dropout_masks(&self) -> DropoutMasks<T> {
        DropoutMasks {
            encoder: self.encoder.masks.clone(),
            decoder_2d: self.decoder_2d.stack.masks.clone(),
            decoder_3d: self.decoder_3d.stack.masks.clone(),
        }
    }

    /// Decoder output before attention (stack output plus skip projection), `H×W×C`.
    pub fn pre_cbam(&self, modality: Modality) -> Array3<T> {
        let m = match modality {
            Modality::TwoD => &self.decoder_2d.pre_cbam,
            Modality::ThreeD => &self.decoder_3d.pre_cbam,
        };
        to_grid(m.clone(), self.height, self.width)
    }

    /// Attention gates `(channel, spatial)` of one decoder, if attention is enabled.
    pub fn cbam_gates(&self, modality: Modality) -> Option<(ndarray::Array1<T>, ndarray::Array1<T>)> {
        let c = match modality {
            Modality::TwoD => &self.decoder_2d.cbam,
            Modality::ThreeD => &self.decoder_3d.cbam,
        };
        c.as_ref().map(|c| (c.channel_gate.clone(), c.spatial_gate.clone()))
    }

    pub fn fused(&self) -> Array3<T> {
        to_grid(self.fused.clone(), self.height, self.width)
    }
}

/// Reconstructions plus the cache for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub recon_2d: Array3<T>,
    pub recon_3d: Array3<T>,
    pub cache: ForwardCache<T>,
}

fn to_rows<T: Scalar>(grid: ArrayView3<T>) -> Array2<T> {
    let (h, w, c) = grid.dim();
    grid.as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("standard layout reshapes")
}

fn to_grid<T: Scalar>(rows: Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = rows.ncols();
    rows.into_shape_with_order((h, w, c)).expect("row count equals h*w")
}

fn check_inputs<T: Scalar>(params: &ModelParams<T>, e2d: &ArrayView3<T>, e3d: &ArrayView3<T>) -> Result<()> {
    let (h2, w2, c2) = e2d.dim();
    let (h3, w3, c3) = e3d.dim();
    if (h2, w2) != (h3, w3) {
        return Err(shape_err!("2D grid {h2}x{w2} is not aligned with 3D grid {h3}x{w3}"));
    }
    if h2 == 0 || w2 == 0 {
        return Err(shape_err!("empty feature grid"));
    }
    if c2 != params.arch.d_2d || c3 != params.arch.d_3d {
        return Err(shape_err!(
            "channels ({c2}, {c3}) do not match model ({}, {})",
            params.arch.d_2d,
            params.arch.d_3d
        ));
    }
    Ok(())
}

fn encode_rows<T: Scalar>(
    params: &ModelParams<T>,
    e2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    masks: MaskSource<'_, '_, T>,
) -> Result<(Array2<T>, StackCache<T>)> {
    check_inputs(params, &e2d, &e3d)?;
    let x = concatenate(Axis(1), &[to_rows(e2d).view(), to_rows(e3d).view()]).expect("row counts agree");
    params.encoder.forward(x, masks)
}

fn decode_rows<T: Scalar>(
    decoder: &Decoder<T>,
    fused: ArrayView2<T>,
    height: usize,
    width: usize,
    masks: MaskSource<'_, '_, T>,
) -> Result<(Array2<T>, DecoderCache<T>)> {
    let (mut y, stack) = decoder.stack.forward(fused.to_owned(), masks)?;
    if let Some(skip) = &decoder.skip {
        y += &skip.forward(fused);
    }
    let (out, cbam) = match &decoder.cbam {
        Some(c) => {
            let (o, cache) = c.forward(y.view(), height, width);
            (o, Some(cache))
        }
        None => (y.clone(), None),
    };
    Ok((out, DecoderCache { stack, pre_cbam: y, cbam }))
}

fn decoder_backward<T: Scalar>(
    decoder: &Decoder<T>,
    cache: &DecoderCache<T>,
    fused: ArrayView2<T>,
    d_out: Array2<T>,
    grad: &mut Decoder<T>,
) -> Array2<T> {
    let d_y = match (&decoder.cbam, &cache.cbam, &mut grad.cbam) {
        (Some(c), Some(cc), Some(g)) => c.backward(cc, d_out.view(), g),
        _ => d_out,
    };
    let mut d_fused = decoder.stack.backward(&cache.stack, d_y.clone(), &mut grad.stack);
    if let (Some(skip), Some(g)) = (&decoder.skip, &mut grad.skip) {
        d_fused += &skip.backward(fused, d_y.view(), g);
    }
    d_fused
}

fn mask_source<'a, 'r, T>(
    mode: &'r mut Mode<'a, T>,
    p: f64,
    pick: impl FnOnce(&'a DropoutMasks<T>) -> &'a [Option<Array2<T>>],
) -> MaskSource<'a, 'r, T> {
    match mode {
        Mode::Eval => MaskSource::Off,
        Mode::Train(rng) => MaskSource::Draw(&mut **rng, p),
        Mode::Replay(m) => MaskSource::Replay(pick(m)),
    }
}

/// Fused embedding `H×W×fused`: per-pixel concatenation through the encoder stack.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    e2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    mut mode: Mode<'_, T>,
) -> Result<Array3<T>> {
    let (h, w, _) = e2d.dim();
    let p = params.arch.dropout_p;
    let (z, _) = encode_rows(params, e2d, e3d, mask_source(&mut mode, p, |m| &m.encoder))?;
    Ok(to_grid(z, h, w))
}

/// Restores one modality from a fused embedding.
pub fn decode<T: Scalar>(
    params: &ModelParams<T>,
    fused: ArrayView3<T>,
    modality: Modality,
    mut mode: Mode<'_, T>,
) -> Result<Array3<T>> {
    let (h, w, f) = fused.dim();
    if f != params.arch.fused {
        return Err(shape_err!("fused map has {f} channels, model expects {}", params.arch.fused));
    }
    let p = params.arch.dropout_p;
    let source = mask_source(&mut mode, p, |m| match modality {
        Modality::TwoD => &m.decoder_2d,
        Modality::ThreeD => &m.decoder_3d,
    });
    let (out, _) = decode_rows(params.decoder(modality), to_rows(fused).view(), h, w, source)?;
    Ok(to_grid(out, h, w))
}

/// Encoder followed by both decoders. Dropout masks are drawn encoder first, then 2D, then 3D.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    e2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    mut mode: Mode<'_, T>,
) -> Result<ForwardPass<T>> {
    let (h, w, _) = e2d.dim();
    let p = params.arch.dropout_p;
    let (fused, encoder) = encode_rows(params, e2d, e3d, mask_source(&mut mode, p, |m| &m.encoder))?;
    let (out_2d, decoder_2d) = decode_rows(
        &params.decoder_2d,
        fused.view(),
        h,
        w,
        mask_source(&mut mode, p, |m| &m.decoder_2d),
    )?;
    let (out_3d, decoder_3d) = decode_rows(
        &params.decoder_3d,
        fused.view(),
        h,
        w,
        mask_source(&mut mode, p, |m| &m.decoder_3d),
    )?;
    Ok(ForwardPass {
        recon_2d: to_grid(out_2d, h, w),
        recon_3d: to_grid(out_3d, h, w),
        cache: ForwardCache {
            fingerprint: params.fingerprint(),
            height: h,
            width: w,
            encoder,
            fused,
            decoder_2d,
            decoder_3d,
        },
    })
}

/// Exact gradients of `<d_2d, Ê_2D> + <d_3d, Ê_3D>` with respect to every parameter.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_2d: ArrayView3<T>,
    d_3d: ArrayView3<T>,
) -> Result<GradientBundle<T>> {
    if cache.fingerprint != params.fingerprint() {
        return Err(MafrError::InvalidArgument(
            "forward cache was produced with different parameters".into(),
        ));
    }
    let (h, w) = (cache.height, cache.width);
    if d_2d.dim() != (h, w, params.arch.d_2d) || d_3d.dim() != (h, w, params.arch.d_3d) {
        return Err(shape_err!(
            "output gradients {:?}/{:?} do not match cached {h}x{w} outputs",
            d_2d.dim(),
            d_3d.dim()
        ));
    }
    let mut grad = GradientBundle::zeros_like(params);
    let g = &mut grad.0;
    let mut d_fused = decoder_backward(
        &params.decoder_2d,
        &cache.decoder_2d,
        cache.fused.view(),
        to_rows(d_2d),
        &mut g.decoder_2d,
    );
    d_fused += &decoder_backward(
        &params.decoder_3d,
        &cache.decoder_3d,
        cache.fused.view(),
        to_rows(d_3d),
        &mut g.decoder_3d,
    );
    params.encoder.backward(&cache.encoder, d_fused, &mut g.encoder);
    Ok(grad)
}
