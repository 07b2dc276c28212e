//! The full enhancer: visual/semantic extractor, U-shaped dual-attention
//! encoder/decoder, and a residual output head.

use std::fmt::Write as _;

use rand::Rng;

use crate::attention::{
    csdmsa, dmsa_block, AttentionKind, AttnParams, BlockOptions, CrossScaleParams, FeaturePair,
};
use crate::error::{Error, Result};
use crate::kernels::MAX_HEAD_DIM;
use crate::ops::{depthwise_separable_conv, resample_down};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels after the extractor; level `l` runs at `c0 * 2^l`.
    pub c0: usize,
    /// Heads at each level, `stages + 1` entries (the last is the bottleneck).
    pub heads: Vec<usize>,
    pub stages: usize,
    pub bottleneck: usize,
    pub input_channels: usize,
    pub posemb: bool,
    pub norm: bool,
    pub attention: AttentionKind,
    /// Visual/semantic split; when off the semantic stream is a copy of the
    /// visual one and the second extractor conv is not built.
    pub vsf: bool,
    /// Fuse the attended mid features in the decoder instead of the raw ones.
    pub mid_primed: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c0: 8,
            heads: vec![2, 2, 2],
            stages: 2,
            bottleneck: 2,
            input_channels: 3,
            posemb: true,
            norm: false,
            attention: AttentionKind::Dual,
            vsf: true,
            mid_primed: false,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 11] = [
    "c0",
    "heads",
    "stages",
    "bottleneck",
    "input_channels",
    "posemb",
    "norm",
    "attention",
    "vsf",
    "mid_primed",
    "seed",
];

fn parse_field<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl ModelConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.c0 << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.stages == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "c0, stages and input_channels must be positive".into(),
            ));
        }
        if self.heads.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "heads lists {} levels, expected stages + 1 = {}",
                self.heads.len(),
                self.stages + 1
            )));
        }
        for (l, &h) in self.heads.iter().enumerate() {
            let c = self.channels_at(l);
            if h == 0 || !c.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "level {l}: {c} channels not divisible by {h} heads"
                )));
            }
            if c / h > MAX_HEAD_DIM {
                return Err(Error::Config(format!(
                    "level {l}: head dimension {} exceeds {MAX_HEAD_DIM}; use more heads",
                    c / h
                )));
            }
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "c0" => self.c0.to_string(),
            "heads" => join(&self.heads),
            "stages" => self.stages.to_string(),
            "bottleneck" => self.bottleneck.to_string(),
            "input_channels" => self.input_channels.to_string(),
            "posemb" => self.posemb.to_string(),
            "norm" => self.norm.to_string(),
            "attention" => self.attention.to_string(),
            "vsf" => self.vsf.to_string(),
            "mid_primed" => self.mid_primed.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "c0" => self.c0 = parse_field(key, v)?,
            "heads" => {
                self.heads = v
                    .split(',')
                    .map(|h| parse_field(key, h))
                    .collect::<Result<_>>()?;
            }
            "stages" => self.stages = parse_field(key, v)?,
            "bottleneck" => self.bottleneck = parse_field(key, v)?,
            "input_channels" => self.input_channels = parse_field(key, v)?,
            "posemb" => self.posemb = parse_field(key, v)?,
            "norm" => self.norm = parse_field(key, v)?,
            "attention" => self.attention = v.trim().parse()?,
            "vsf" => self.vsf = parse_field(key, v)?,
            "mid_primed" => self.mid_primed = parse_field(key, v)?,
            "seed" => self.seed = parse_field(key, v)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    /// One `key=value` line per field, in [`CONFIG_KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k}={}", self.value_of(k).unwrap());
        }
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First key whose value differs, with (ours, theirs).
    pub fn first_difference(&self, other: &Self) -> Option<(&'static str, String, String)> {
        CONFIG_KEYS.iter().find_map(|&k| {
            let (a, b) = (self.value_of(k).unwrap(), other.value_of(k).unwrap());
            (a != b).then_some((k, a, b))
        })
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            kind: self.attention,
            posemb: self.posemb,
            norm: self.norm,
            mid_primed: self.mid_primed,
        }
    }

    /// Spatial extents must be multiples of this; inputs are padded to it.
    pub fn multiple(&self) -> usize {
        1 << self.stages
    }

    /// Smallest accepted input height/width.
    pub fn min_extent(&self) -> usize {
        (2 * self.multiple()).max(8)
    }
}

type Conv = (ParamId, ParamId);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorParams {
    /// Plain 3x3 conv, `input_channels -> c0`.
    pub conv1: Conv,
    /// Two depthwise-separable convs `(dw [C,1,3,3], pw [C,C,1,1], bias)`;
    /// absent when the visual/semantic split is disabled.
    pub conv2: Option<[(ParamId, ParamId, ParamId); 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderStageParams {
    pub attn: (AttnParams, AttnParams),
    /// Stride-2 4x4 conv `C -> 2C` per stream.
    pub down_visual: Conv,
    pub down_semantic: Conv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub extractor: ExtractorParams,
    pub encoder: Vec<EncoderStageParams>,
    pub bottleneck: Vec<(AttnParams, AttnParams)>,
    /// `decoder[s - 1]` runs at level `s`.
    pub decoder: Vec<CrossScaleParams>,
    /// 3x3 mapping conv `2*c0 -> input_channels`, zero at init.
    pub head: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

fn conv_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 4],
    rng: &mut R,
) -> Result<Conv> {
    let w = store.register(format!("{name}.weight"), kaiming_uniform(&shape, rng))?;
    let b = store.register(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
    Ok((w, b))
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let c0 = config.c0;

        let conv1 = conv_params(
            &mut store,
            "vsc.conv1",
            [c0, config.input_channels, 3, 3],
            rng,
        )?;
        let conv2 = if config.vsf {
            let mut sep = |i: usize| -> Result<(ParamId, ParamId, ParamId)> {
                let dw = store.register(
                    format!("vsc.sep{i}.dw"),
                    kaiming_uniform(&[c0, 1, 3, 3], rng),
                )?;
                let (pw, b) =
                    conv_params(&mut store, &format!("vsc.sep{i}.pw"), [c0, c0, 1, 1], rng)?;
                Ok((dw, pw, b))
            };
            Some([sep(1)?, sep(2)?])
        } else {
            None
        };
        let extractor = ExtractorParams { conv1, conv2 };

        let mut encoder = Vec::new();
        for i in 0..config.stages {
            let (c, h) = (config.channels_at(i), config.heads[i]);
            let p = format!("enc{}", i + 1);
            let attn = (
                AttnParams::register(&mut store, &format!("{p}.attn_v"), c, h, rng)?,
                AttnParams::register(&mut store, &format!("{p}.attn_s"), c, h, rng)?,
            );
            let down_visual =
                conv_params(&mut store, &format!("{p}.down_v"), [2 * c, c, 4, 4], rng)?;
            let down_semantic =
                conv_params(&mut store, &format!("{p}.down_s"), [2 * c, c, 4, 4], rng)?;
            encoder.push(EncoderStageParams {
                attn,
                down_visual,
                down_semantic,
            });
        }

        let (cd, hd) = (
            config.channels_at(config.stages),
            config.heads[config.stages],
        );
        let mut bottleneck = Vec::new();
        for j in 0..config.bottleneck {
            bottleneck.push((
                AttnParams::register(&mut store, &format!("bottleneck{}.v", j + 1), cd, hd, rng)?,
                AttnParams::register(&mut store, &format!("bottleneck{}.s", j + 1), cd, hd, rng)?,
            ));
        }

        let mut decoder = Vec::new();
        for s in 1..=config.stages {
            let (c, h) = (config.channels_at(s), config.heads[s]);
            decoder.push(CrossScaleParams::register(
                &mut store,
                &format!("dec{s}"),
                c,
                h,
                rng,
            )?);
        }

        let head = (
            store.register(
                "head.weight",
                Tensor::zeros(&[config.input_channels, 2 * c0, 3, 3]),
            )?,
            store.register("head.bias", Tensor::zeros(&[config.input_channels]))?,
        );
        let layout = Layout {
            extractor,
            encoder,
            bottleneck,
            decoder,
            head,
        };
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Visual features from a 3x3 conv, semantic features from two further
    /// depthwise-separable convs on top. No activations in between.
    pub fn extract(&self, tape: &mut Tape<T>, vars: &[Var], img: Var) -> Result<FeaturePair> {
        let (_, c, h, w) = tape.value(img).dims4("extract_visual_semantic")?;
        if c != self.config.input_channels {
            return Err(Error::Config(format!(
                "extractor expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        if h < 8 || w < 8 {
            return Err(Error::invalid(
                "extract_visual_semantic",
                format!("{h}x{w} is smaller than 8x8"),
            ));
        }
        let ex = &self.layout.extractor;
        let fv = tape.conv2d(img, ex.conv1.0.var(vars), Some(ex.conv1.1.var(vars)), 1, 1)?;
        let fs = match &ex.conv2 {
            Some(seps) => {
                let mut x = fv;
                for &(dw, pw, b) in seps {
                    x = depthwise_separable_conv(tape, x, dw.var(vars), pw.var(vars), b.var(vars))?;
                }
                x
            }
            None => fv,
        };
        Ok(FeaturePair::new(fv, fs))
    }

    /// Dual block then per-stream downsampling; the result is both the next
    /// stage's input and the tap saved for the decoder.
    pub fn encoder_stage(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        pair: FeaturePair,
        i: usize,
    ) -> Result<FeaturePair> {
        let st = &self.layout.encoder[i];
        let opts = self.config.block_options();
        let a = dmsa_block(tape, pair, &st.attn.0, &st.attn.1, vars, &opts)?;
        let down = |tape: &mut Tape<T>, x: Var, c: Conv| {
            resample_down(tape, x, c.0.var(vars), c.1.var(vars))
        };
        Ok(FeaturePair::new(
            down(tape, a.visual, st.down_visual)?,
            down(tape, a.semantic, st.down_semantic)?,
        ))
    }

    /// Extractor plus encoder. `taps[0]` is the extractor output and
    /// `taps[s]` the output of stage `s`; the last tap feeds the bottleneck.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &[Var], img: Var) -> Result<Vec<FeaturePair>> {
        let mut taps = vec![self.extract(tape, vars, img)?];
        for i in 0..self.config.stages {
            let next = self.encoder_stage(tape, vars, taps[i], i)?;
            taps.push(next);
        }
        Ok(taps)
    }

    /// Maps `[B,C,H,W]` images in `[0,1]` to enhanced images of the same
    /// shape. Out-of-range inputs are clamped with a warning; extents that
    /// are not multiples of `2^stages` are zero-padded and cropped back.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], img: Var) -> Result<Var> {
        let cfg = &self.config;
        let (_, c, h, w) = tape.value(img).dims4("forward")?;
        if c != cfg.input_channels {
            return Err(Error::Dimension {
                op: "forward",
                axis: "channels",
                expected: cfg.input_channels,
                found: c,
            });
        }
        let min = cfg.min_extent();
        if h < min || w < min {
            return Err(Error::invalid(
                "forward",
                format!("{h}x{w} input is smaller than the minimum {min}x{min}"),
            ));
        }
        let img = if tape
            .value(img)
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            log::warn!("input values outside [0,1] are clamped");
            tape.clamp(img, T::zero(), T::one())?
        } else {
            img
        };
        let m = cfg.multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x = if (hp, wp) != (h, w) {
            tape.resize(img, hp, wp)?
        } else {
            img
        };

        let taps = self.encode(tape, vars, x)?;
        let opts = cfg.block_options();
        let mut pair = taps[cfg.stages];
        for (p, q) in &self.layout.bottleneck {
            pair = dmsa_block(tape, pair, p, q, vars, &opts)?;
        }
        for s in (1..=cfg.stages).rev() {
            pair = csdmsa(
                tape,
                pair,
                taps[s],
                &self.layout.decoder[s - 1],
                vars,
                &opts,
            )?;
        }

        let cat = tape.concat_channels(pair.visual, pair.semantic)?;
        let (hw, hb) = self.layout.head;
        let y = tape.conv2d(cat, hw.var(vars), Some(hb.var(vars)), 1, 1)?;
        let y = if (hp, wp) != (h, w) {
            tape.resize(y, h, w)?
        } else {
            y
        };
        let y = tape.add(y, img)?;
        tape.clamp(y, T::zero(), T::one())
    }

    /// Inference on a fresh tape without gradients.
    pub fn enhance(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}
