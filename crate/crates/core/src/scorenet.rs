//! Conditioned 3D U-shaped denoiser network.
//!
//! The raw network `F` sees the channels `c_in·x ‖ low ‖ mr ‖ coords` and a
//! Fourier embedding of `c_noise`; the denoiser composes its output as
//! `D = c_skip·x + c_out·F`. Every block is conv3 → group norm → noise
//! modulation → SiLU; levels are joined by average pooling, nearest
//! upsampling and skip concatenation. The output head starts at zero, so an
//! untrained model returns `c_skip·x`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser, Differentiable, NoiseSchedule, Precond, Pullback};
use crate::nn::{ConvLayer, Ctx, Infer, LinearLayer, Padding, ParamLayout, Real, Tape, Tensor};
use crate::rng::stream;
use crate::volumes::Shape3;
use crate::{CsrdError, Result};

/// Lowest and highest angular frequency of the noise-level embedding.
const EMBED_FREQ_RANGE: (f64, f64) = (1.0, 64.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreModelConfig {
    pub base_channels: usize,
    /// Number of resolution levels; level `l` has `base_channels·2^l`
    /// channels.
    pub depth: usize,
    pub use_mr: bool,
    /// Must equal `5 + use_mr`: noisy residual, low-dose, optional MR and
    /// three coordinate channels.
    pub in_channels: usize,
    pub patch_size: [usize; 3],
    pub time_embed_dim: usize,
    /// Upper bound on normalization groups; each layer uses
    /// `gcd(channels, norm_groups)` groups.
    pub norm_groups: usize,
    #[serde(default)]
    pub padding: Padding,
    /// Adds each level's input (projected by a 1x1 conv when the width
    /// changes) to the output of its two blocks.
    #[serde(default)]
    pub residual_blocks: bool,
    /// Noise-modulated linear 3x3x3 path from the input channels straight
    /// to the output, zero-initialized.
    #[serde(default)]
    pub input_skip: bool,
}

impl ScoreModelConfig {
    pub fn new(base_channels: usize, depth: usize, use_mr: bool, patch: usize) -> Self {
        Self {
            base_channels,
            depth,
            use_mr,
            in_channels: 5 + use_mr as usize,
            patch_size: [patch; 3],
            time_embed_dim: 32,
            norm_groups: 8,
            padding: Padding::Zeros,
            residual_blocks: true,
            input_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels != 5 + self.use_mr as usize {
            problems.push(format!(
                "in_channels {} inconsistent with use_mr = {}",
                self.in_channels, self.use_mr
            ));
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".into());
        }
        if self.depth == 0 {
            problems.push("depth must be at least 1".into());
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            problems.push("time_embed_dim must be even and at least 4".into());
        }
        if self.norm_groups == 0 {
            problems.push("norm_groups must be positive".into());
        }
        let unit = 1usize << self.depth.min(16);
        if self.patch_size.iter().any(|&p| p == 0 || p % unit != 0) {
            problems.push(format!(
                "patch_size {:?} must be divisible by 2^depth = {unit}",
                self.patch_size
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CsrdError::Config(problems.join("; ")))
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn groups(&self, channels: usize) -> usize {
        gcd(channels, self.norm_groups)
    }

    /// Spatial extents the network accepts must be multiples of this.
    pub fn spatial_unit(&self) -> usize {
        1 << (self.depth - 1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: ConvLayer,
    film: LinearLayer,
    groups: usize,
}

#[derive(Debug, Clone)]
struct Level {
    blocks: [Block; 2],
    /// Residual connection: `None` is no connection, `Some(None)` the
    /// identity, `Some(Some(conv))` a 1x1 projection.
    shortcut: Option<Option<ConvLayer>>,
}

#[derive(Debug, Clone)]
struct InputSkip {
    conv: ConvLayer,
    film: LinearLayer,
}

#[derive(Debug, Clone)]
struct Arch {
    layout: ParamLayout,
    emb: [LinearLayer; 2],
    enc: Vec<Level>,
    /// Decoder levels from `depth - 2` down to 0.
    dec: Vec<Level>,
    head: ConvLayer,
    skip: Option<InputSkip>,
}

impl Arch {
    fn build(cfg: &ScoreModelConfig) -> Self {
        let mut layout = ParamLayout::default();
        let e = cfg.time_embed_dim;
        let emb = [layout.linear("embed.0", e, e, 1.0), layout.linear("embed.1", e, e, 1.0)];
        let pad = cfg.padding;
        let block = |layout: &mut ParamLayout, name: String, cin: usize, cout: usize| Block {
            conv: layout.conv(&format!("{name}.conv"), cin, cout, 3, pad, false),
            film: layout.linear(&format!("{name}.film"), e, 2 * cout, 1.0),
            groups: cfg.groups(cout),
        };
        let level = |layout: &mut ParamLayout, name: String, cin: usize, cout: usize| {
            let blocks = [
                block(layout, format!("{name}.0"), cin, cout),
                block(layout, format!("{name}.1"), cout, cout),
            ];
            let shortcut = cfg
                .residual_blocks
                .then(|| (cin != cout).then(|| layout.conv(&format!("{name}.shortcut"), cin, cout, 1, pad, false)));
            Level { blocks, shortcut }
        };
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            enc.push(level(&mut layout, format!("enc{l}"), cin, c));
            cin = c;
        }
        let mut dec = Vec::new();
        for l in (0..cfg.depth.saturating_sub(1)).rev() {
            let c = cfg.channels(l);
            dec.push(level(&mut layout, format!("dec{l}"), cin + c, c));
            cin = c;
        }
        let head = layout.conv("head", cin, 1, 1, pad, true);
        let skip = cfg.input_skip.then(|| InputSkip {
            conv: layout.conv("input_skip.conv", cfg.in_channels, 1, 3, pad, true),
            film: layout.linear("input_skip.film", e, 2, 0.0),
        });
        Self {
            layout,
            emb,
            enc,
            dec,
            head,
            skip,
        }
    }

    fn level<T: Real, C: Ctx<T>>(ctx: &mut C, level: &Level, h: &C::X, e: &C::X) -> C::X {
        let mut out = h.clone();
        for b in &level.blocks {
            out = Self::block(ctx, b, &out, e);
        }
        match &level.shortcut {
            None => out,
            Some(None) => ctx.add(&out, h),
            Some(Some(proj)) => {
                let p = ctx.conv(proj, h);
                ctx.add(&out, &p)
            }
        }
    }

    fn block<T: Real, C: Ctx<T>>(ctx: &mut C, b: &Block, h: &C::X, e: &C::X) -> C::X {
        let h = ctx.conv(&b.conv, h);
        let h = ctx.group_norm(&h, b.groups);
        let ss = ctx.linear(&b.film, e);
        let h = ctx.film(&h, &ss);
        ctx.silu(&h)
    }

    fn run<T: Real, C: Ctx<T>>(&self, ctx: &mut C, input: Tensor<T>, embedding: Tensor<T>) -> C::X {
        let e = ctx.input(embedding);
        let e = ctx.linear(&self.emb[0], &e);
        let e = ctx.silu(&e);
        let e = ctx.linear(&self.emb[1], &e);
        let e = ctx.silu(&e);
        let x = ctx.input(input);
        let mut h = x.clone();
        let mut skips = Vec::new();
        for (l, level) in self.enc.iter().enumerate() {
            if l > 0 {
                skips.push(h.clone());
                h = ctx.avg_pool(&h);
            }
            h = Self::level(ctx, level, &h, &e);
        }
        for level in &self.dec {
            let up = ctx.upsample(&h);
            let skip = skips.pop().expect("one skip per decoder level");
            h = ctx.concat(&up, &skip);
            h = Self::level(ctx, level, &h, &e);
        }
        let out = ctx.conv(&self.head, &h);
        match &self.skip {
            None => out,
            Some(s) => {
                let lin = ctx.conv(&s.conv, &x);
                let ss = ctx.linear(&s.film, &e);
                let lin = ctx.film(&lin, &ss);
                ctx.add(&out, &lin)
            }
        }
    }
}

/// Sinusoidal features of `c_noise` at geometrically spaced frequencies.
fn noise_embedding<T: Real>(c_noise: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let (lo, hi) = EMBED_FREQ_RANGE;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let f = lo * (hi / lo).powf(k as f64 / (half - 1).max(1) as f64);
        out.push(T::of((f * c_noise).sin()));
    }
    for k in 0..half {
        let f = lo * (hi / lo).powf(k as f64 / (half - 1).max(1) as f64);
        out.push(T::of((f * c_noise).cos()));
    }
    Tensor::vector(out)
}

/// The conditioned denoiser with its parameters.
#[derive(Debug, Clone)]
pub struct ScoreModel<T = f32> {
    pub config: ScoreModelConfig,
    pub schedule: NoiseSchedule,
    pub params: Vec<T>,
    /// Exponential moving average of `params`, used for inference.
    pub ema: Option<Vec<T>>,
    /// Dataset residual standard deviation; the model works on residuals
    /// divided by it.
    pub residual_scale: f64,
    arch: Arch,
}

impl<T: Real> ScoreModel<T> {
    /// Freshly initialized model; the initialization stream is derived from
    /// `seed`.
    pub fn new(config: ScoreModelConfig, schedule: NoiseSchedule, residual_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if !(residual_scale > 0.0 && residual_scale.is_finite()) {
            return Err(CsrdError::Config(format!("residual scale must be positive, got {residual_scale}")));
        }
        let arch = Arch::build(&config);
        let params = arch.layout.init(&mut stream(seed, &[0x5C0E]));
        Ok(Self {
            config,
            schedule,
            params,
            ema: None,
            residual_scale,
            arch,
        })
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_params(
        config: ScoreModelConfig,
        schedule: NoiseSchedule,
        residual_scale: f64,
        params: Vec<T>,
        ema: Option<Vec<T>>,
    ) -> Result<Self> {
        let mut model = Self::new(config, schedule, residual_scale, 0)?;
        let n = model.params.len();
        if params.len() != n || ema.as_ref().is_some_and(|e| e.len() != n) {
            return Err(CsrdError::Checkpoint(format!(
                "parameter count mismatch: architecture has {n}, got {}",
                params.len()
            )));
        }
        model.params = params;
        model.ema = ema;
        Ok(model)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.arch.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Copy that evaluates with the averaged parameters when present.
    pub fn inference_model(&self) -> Self {
        let mut m = self.clone();
        if let Some(ema) = m.ema.take() {
            m.params = ema;
        }
        m
    }

    fn check_shape(&self, shape: Shape3) -> Result<()> {
        let unit = self.config.spatial_unit();
        if shape.0.iter().any(|&n| n == 0 || n % unit != 0) {
            return Err(CsrdError::Shape(format!(
                "spatial size {shape} is not divisible by {unit}"
            )));
        }
        Ok(())
    }

    fn build_input(&self, noisy: &[f64], p: &Precond, cond: &Condition) -> Result<Tensor<T>> {
        let shape = cond.shape();
        self.check_shape(shape)?;
        let n = shape.len();
        if noisy.len() != n || cond.low.len() != n {
            return Err(CsrdError::Dimension(format!(
                "noisy residual ({}) and conditioning ({}) do not match region {shape}",
                noisy.len(),
                cond.low.len()
            )));
        }
        match (self.config.use_mr, cond.mr) {
            (true, None) => return Err(CsrdError::Config("model expects an MR channel".into())),
            (false, Some(_)) => return Err(CsrdError::Config("model was configured without MR".into())),
            _ => {}
        }
        let mut data = Vec::with_capacity(self.config.in_channels * n);
        data.extend(noisy.iter().map(|&v| T::of(p.c_in * v)));
        data.extend(cond.low.iter().map(|&v| T::of(v as f64)));
        if let Some(mr) = cond.mr {
            data.extend(mr.iter().map(|&v| T::of(v as f64)));
        }
        for c in cond.region.coord_channels() {
            data.extend(c.data.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Tensor::from_vec(self.config.in_channels, shape, data))
    }

    fn compose(&self, raw: &Tensor<T>, noisy: &[f64], p: &Precond, sigma: f64) -> Result<Vec<f64>> {
        let out: Vec<f64> = raw
            .data
            .iter()
            .zip(noisy)
            .map(|(f, x)| p.c_skip * x + p.c_out * f.f64())
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CsrdError::Numeric(format!("non-finite network output at sigma {sigma}")));
        }
        Ok(out)
    }

    fn embedding(&self, p: &Precond) -> Tensor<T> {
        noise_embedding(p.c_noise, self.config.time_embed_dim)
    }

    /// Raw network output on a prepared input tensor.
    fn raw(&self, input: Tensor<T>, p: &Precond, padding: Option<Padding>) -> Tensor<T> {
        let mut ctx = Infer::new(&self.params);
        if let Some(pad) = padding {
            ctx = ctx.with_padding(pad);
        }
        self.arch.run(&mut ctx, input, self.embedding(p))
    }

    /// Denoised standardized residual `D(noisy; σ, cond)`.
    pub fn forward(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> Result<Vec<f64>> {
        let p = self.schedule.precond(sigma)?;
        let input = self.build_input(noisy, &p, cond)?;
        let raw = self.raw(input, &p, None);
        self.compose(&raw, noisy, &p, sigma)
    }

    /// Maximum deviation between shifting the inputs before the network and
    /// shifting its output afterwards, with periodic boundaries. Coordinate
    /// channels stay fixed unless `shift_coords`.
    pub fn shift_equivariance_probe(
        &self,
        noisy: &[f64],
        sigma: f64,
        cond: &Condition,
        shift: [isize; 3],
        shift_coords: bool,
    ) -> Result<f64> {
        let p = self.schedule.precond(sigma)?;
        let input = self.build_input(noisy, &p, cond)?;
        let rolled_channels = if shift_coords {
            input.channels
        } else {
            input.channels - 3
        };
        let shifted_input = roll(&input, shift, rolled_channels);
        let a = self.raw(shifted_input, &p, Some(Padding::Periodic));
        let b = roll(&self.raw(input, &p, Some(Padding::Periodic)), shift, 1);
        Ok(a
            .data
            .iter()
            .zip(&b.data)
            .map(|(u, v)| (u.f64() - v.f64()).abs())
            .fold(0.0, f64::max)
            * p.c_out)
    }
}

/// Cyclic shift of the first `channels` channels; the rest are copied.
fn roll<T: Real>(t: &Tensor<T>, shift: [isize; 3], channels: usize) -> Tensor<T> {
    let s = t.shape;
    let mut out = t.clone();
    for c in 0..channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..s.nz() {
            for y in 0..s.ny() {
                for x in 0..s.nx() {
                    let to = [x, y, z]
                        .iter()
                        .zip(shift)
                        .zip(s.0)
                        .map(|((&i, d), n)| (i as isize + d).rem_euclid(n as isize) as usize)
                        .collect::<Vec<_>>();
                    dst[s.index(to[0], to[1], to[2])] = src[s.index(x, y, z)];
                }
            }
        }
    }
    out
}

impl<T: Real> Denoiser for ScoreModel<T> {
    fn denoise(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.forward(noisy, sigma, cond)
    }

    fn residual_scale(&self) -> f64 {
        self.residual_scale
    }
}

impl<T: Real> Differentiable for ScoreModel<T> {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn denoise_with_pullback(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> Result<(Vec<f64>, Pullback<'_>)> {
        let p = self.schedule.precond(sigma)?;
        let input = self.build_input(noisy, &p, cond)?;
        let mut tape = Tape::new(&self.params);
        let out = self.arch.run(&mut tape, input, self.embedding(&p));
        let denoised = self.compose(tape.value(&out), noisy, &p, sigma)?;
        let shape = tape.value(&out).shape;
        let pullback = move |upstream: &[f64]| {
            let seed = Tensor::from_vec(1, shape, upstream.iter().map(|&g| T::of(g * p.c_out)).collect());
            tape.backward(out, seed).into_iter().map(|g| g.f64()).collect()
        };
        Ok((denoised, Box::new(pullback)))
    }
}
