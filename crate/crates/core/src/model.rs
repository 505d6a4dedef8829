//! Encoder `f`, classifier `g`, projection `z`, rotation head `h` and the
//! EMA shadow used for evaluation.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{tag, Rng};
use crate::tensor::{Real, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"CRMT";
const VERSION: u32 = 1;
const EMA_PREFIX: &str = "ema/";
pub const NUM_ROTATIONS: usize = 4;
const BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjHead {
    Linear,
    /// The features themselves serve as the projection.
    None,
    /// linear → relu → linear, hidden width = proj_dim.
    Mlp,
}

impl FromStr for ProjHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProjHead::Linear),
            "none" => Ok(ProjHead::None),
            "mlp" => Ok(ProjHead::Mlp),
            _ => Err(Error::Config(format!("proj_head must be linear|none|mlp, got `{s}`"))),
        }
    }
}

impl fmt::Display for ProjHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjHead::Linear => "linear",
            ProjHead::None => "none",
            ProjHead::Mlp => "mlp",
        })
    }
}

/// Where the projection reads features: (a) before or (b) after global
/// average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    A,
    B,
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Placement::A),
            "b" => Ok(Placement::B),
            _ => Err(Error::Config(format!("dist_placement must be a|b, got `{s}`"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::A => "a",
            Placement::B => "b",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Channels of the first block; blocks use w, 2w, 4w.
    pub width: usize,
    pub proj_dim: usize,
    pub proj_head: ProjHead,
    pub placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 10,
            image_size: 32,
            width: 16,
            proj_dim: 128,
            proj_head: ProjHead::Linear,
            placement: Placement::A,
        }
    }
}

impl ModelConfig {
    pub fn feat_channels(&self) -> usize {
        self.width << (BLOCKS - 1)
    }

    pub fn feat_side(&self) -> usize {
        self.image_size >> BLOCKS
    }

    /// Length of the projection input.
    pub fn proj_in(&self) -> usize {
        match self.placement {
            Placement::A => self.feat_channels() * self.feat_side() * self.feat_side(),
            Placement::B => self.feat_channels(),
        }
    }

    pub fn proj_out(&self) -> usize {
        match self.proj_head {
            ProjHead::None => self.proj_in(),
            _ => self.proj_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.width == 0 || self.proj_dim == 0 {
            return Err(Error::Config("width and proj_dim must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << BLOCKS) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                1 << BLOCKS
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut v = Vec::new();
        let mut cin = CHANNELS;
        for b in 0..BLOCKS {
            let cout = self.width << b;
            v.push((format!("enc{b}.w"), vec![cout, cin, 3, 3], Init::Relu(cin * 9)));
            v.push((format!("enc{b}.b"), vec![cout], Init::Zero));
            cin = cout;
        }
        let c = self.feat_channels();
        v.push(("cls.w".into(), vec![c, self.num_classes], Init::Linear(c)));
        v.push(("cls.b".into(), vec![self.num_classes], Init::Zero));
        let pin = self.proj_in();
        match self.proj_head {
            ProjHead::None => {}
            ProjHead::Linear => {
                v.push(("proj.w".into(), vec![pin, self.proj_dim], Init::Linear(pin)));
                v.push(("proj.b".into(), vec![self.proj_dim], Init::Zero));
            }
            ProjHead::Mlp => {
                v.push(("proj.w1".into(), vec![pin, self.proj_dim], Init::Relu(pin)));
                v.push(("proj.b1".into(), vec![self.proj_dim], Init::Zero));
                v.push(("proj.w2".into(), vec![self.proj_dim, self.proj_dim], Init::Linear(self.proj_dim)));
                v.push(("proj.b2".into(), vec![self.proj_dim], Init::Zero));
            }
        }
        v.push(("rot.w1".into(), vec![c, c], Init::Relu(c)));
        v.push(("rot.b1".into(), vec![c], Init::Zero));
        v.push(("rot.w2".into(), vec![c, NUM_ROTATIONS], Init::Linear(c)));
        v.push(("rot.b2".into(), vec![NUM_ROTATIONS], Init::Zero));
        v
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    /// Uniform ±√(6/fan_in), for layers followed by a ReLU.
    Relu(usize),
    /// Uniform ±√(3/fan_in).
    Linear(usize),
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelState {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

/// Tape handles for every parameter, in [`ModelState`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Handles in [`ModelState::names`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Outputs of one forward pass; all are tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    /// (N, 4w, s, s) encoder output before pooling.
    pub feat_a: Var,
    /// (N, 4w) pooled features.
    pub feat_b: Var,
    pub logits: Var,
    pub proj: Var,
}

impl ModelState {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::substream(seed, 0, tag::INIT);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in cfg.layout() {
            let n: usize = shape.iter().product();
            let bound = match init {
                Init::Zero => 0.0,
                Init::Relu(fan_in) => (6.0 / fan_in as f64).sqrt(),
                Init::Linear(fan_in) => (3.0 / fan_in as f64).sqrt(),
            };
            let data = (0..n)
                .map(|_| if bound == 0.0 { 0.0 } else { rng.range(-bound, bound) as f32 })
                .collect();
            names.push(name);
            params.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(ModelState {
            cfg: cfg.clone(),
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Biases are excluded from weight decay.
    pub fn is_weight(&self, i: usize) -> bool {
        self.params[i].shape().len() > 1
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01B3);
                }
            }
        }
        h
    }

    /// Records every parameter on `tape`. Frozen parameters become
    /// constants and receive no gradient.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.leaf(&p.cast::<T>().with_grad())
                    } else {
                        let c = p.cast::<T>();
                        tape.constant(c.shape().to_vec(), c.data().to_vec())
                            .expect("parameter shape is consistent")
                    }
                })
                .collect(),
        )
    }

    fn var(&self, vars: &ParamVars, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).expect("known parameter");
        vars.0[i]
    }

    /// Stacks images into an (N, 3, H, W) constant, checking their size.
    pub fn batch_var<T: Real>(&self, tape: &mut Tape<T>, images: &[&Image]) -> Result<Var> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * CHANNELS * s * s);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::shape(
                    "forward",
                    format!("expected {s}x{s} images, got {}x{}", img.height(), img.width()),
                ));
            }
            data.extend(img.data().iter().map(|&v| T::lit(v as f64)));
        }
        tape.constant(vec![images.len(), CHANNELS, s, s], data)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<FeatureBundle> {
        let s = self.cfg.image_size;
        if tape.shape(x).len() != 4 || tape.shape(x)[1..] != [CHANNELS, s, s] {
            return Err(Error::shape(
                "forward",
                format!("expected (N, {CHANNELS}, {s}, {s}), got {:?}", tape.shape(x)),
            ));
        }
        let mut h = x;
        for b in 0..BLOCKS {
            let w = self.var(vars, &format!("enc{b}.w"));
            let bias = self.var(vars, &format!("enc{b}.b"));
            h = tape.conv2d(h, w, Some(bias), 1, 1)?;
            h = tape.relu(h)?;
            h = tape.avg_pool2(h)?;
        }
        let feat_a = h;
        let feat_b = tape.global_avg_pool(feat_a)?;
        let logits = tape.linear(feat_b, self.var(vars, "cls.w"), self.var(vars, "cls.b"))?;
        let pin = match self.cfg.placement {
            Placement::A => tape.flatten(feat_a)?,
            Placement::B => feat_b,
        };
        let proj = match self.cfg.proj_head {
            ProjHead::None => pin,
            ProjHead::Linear => tape.linear(pin, self.var(vars, "proj.w"), self.var(vars, "proj.b"))?,
            ProjHead::Mlp => {
                let h = tape.linear(pin, self.var(vars, "proj.w1"), self.var(vars, "proj.b1"))?;
                let h = tape.relu(h)?;
                tape.linear(h, self.var(vars, "proj.w2"), self.var(vars, "proj.b2"))?
            }
        };
        Ok(FeatureBundle {
            feat_a,
            feat_b,
            logits,
            proj,
        })
    }

    /// Rotation logits (N, 4) from pooled features.
    pub fn rot_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, feat_b: Var) -> Result<Var> {
        let c = self.cfg.feat_channels();
        let shape = tape.shape(feat_b);
        if shape.len() != 2 || shape[1] != c {
            return Err(Error::shape("rot_forward", format!("expected (N, {c}), got {shape:?}")));
        }
        let h = tape.linear(feat_b, self.var(vars, "rot.w1"), self.var(vars, "rot.b1"))?;
        let h = tape.relu(h)?;
        tape.linear(h, self.var(vars, "rot.w2"), self.var(vars, "rot.b2"))
    }

    /// Copies accumulated tape gradients into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape<f32>, vars: &ParamVars) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&vars.0) {
            p.clear_grad();
            tape.write_grad(v, p)?;
        }
        Ok(())
    }

    /// Pooled features, logits and projections for `images`, evaluated in
    /// chunks without recording gradients.
    pub fn infer(&self, images: &[&Image]) -> Result<Inference> {
        const CHUNK: usize = 128;
        let mut out = Inference {
            feat_b: Vec::new(),
            logits: Vec::new(),
            proj: Vec::new(),
        };
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::<f32>::new();
            let vars = self.bind(&mut tape, false);
            let x = self.batch_var(&mut tape, chunk)?;
            let fb = self.forward(&mut tape, &vars, x)?;
            out.feat_b.extend_from_slice(tape.value(fb.feat_b));
            out.logits.extend_from_slice(tape.value(fb.logits));
            out.proj.extend_from_slice(tape.value(fb.proj));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        let inf = self.infer(images)?;
        Ok(inf
            .logits
            .chunks(self.cfg.num_classes)
            .map(argmax)
            .collect())
    }
}

/// Row-major outputs of [`ModelState::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub feat_b: Vec<f32>,
    pub logits: Vec<f32>,
    pub proj: Vec<f32>,
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exponential moving average of the parameters, kept in f64 so long runs
/// of updates do not drift from the closed form.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    shadow: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl EmaState {
    pub fn new(state: &ModelState, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(EmaState {
            decay,
            shadow: state
                .params
                .iter()
                .map(|p| p.data().iter().map(|&v| v as f64).collect())
                .collect(),
            shapes: state.params.iter().map(|p| p.shape().to_vec()).collect(),
        })
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.shadow
    }

    /// A model carrying the shadow weights (rounded to f32).
    pub fn to_state(&self, like: &ModelState) -> Result<ModelState> {
        self.check_shapes(like)?;
        let mut s = like.clone();
        for (p, sh) in s.params.iter_mut().zip(&self.shadow) {
            for (d, &v) in p.data_mut().iter_mut().zip(sh) {
                *d = v as f32;
            }
            p.clear_grad();
        }
        Ok(s)
    }

    fn check_shapes(&self, state: &ModelState) -> Result<()> {
        if self.shapes.len() != state.params.len()
            || self.shapes.iter().zip(&state.params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape("ema", "shadow shapes no longer match the model"));
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("EMA decay must lie in (0, 1), got {decay}")))
    }
}

/// shadow ← decay·shadow + (1−decay)·param.
pub fn ema_update(ema: &mut EmaState, state: &ModelState, decay: f64) -> Result<()> {
    check_decay(decay)?;
    ema.check_shapes(state)?;
    for (sh, p) in ema.shadow.iter_mut().zip(&state.params) {
        for (s, &v) in sh.iter_mut().zip(p.data()) {
            *s = decay * *s + (1.0 - decay) * v as f64;
        }
    }
    Ok(())
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes raw and EMA tensors in the CRMT checkpoint format.
pub fn save_checkpoint(path: &Path, state: &ModelState, ema: &EmaState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(2 * state.params.len() as u32).to_le_bytes());
    for (name, p) in state.names.iter().zip(&state.params) {
        write_tensor(&mut buf, name, p.shape(), p.data().iter().copied());
    }
    for ((name, p), sh) in state.names.iter().zip(&state.params).zip(&ema.shadow) {
        write_tensor(
            &mut buf,
            &format!("{EMA_PREFIX}{name}"),
            p.shape(),
            sh.iter().map(|&v| v as f32),
        );
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads a checkpoint into a model of configuration `cfg` plus its EMA.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig, ema_decay: f64) -> Result<(ModelState, EmaState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::format(path, "not a CRMT checkpoint"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut state = ModelState::init(cfg, 0)?;
    let mut ema = EmaState::new(&state, ema_decay)?;
    let mut seen = vec![false; 2 * state.params.len()];
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let (is_ema, base) = match name.strip_prefix(EMA_PREFIX) {
            Some(b) => (true, b),
            None => (false, name.as_str()),
        };
        let i = state
            .names
            .iter()
            .position(|n| n == base)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor `{name}`")))?;
        if state.params[i].shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!("`{name}` has shape {shape:?}, model expects {:?}", state.params[i].shape()),
            ));
        }
        if is_ema {
            ema.shadow[i] = data.map(f64::from).collect();
        } else {
            for (d, v) in state.params[i].data_mut().iter_mut().zip(data) {
                *d = v;
            }
        }
        seen[i + if is_ema { state.params.len() } else { 0 }] = true;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        let n = state.params.len();
        let prefix = if i >= n { EMA_PREFIX } else { "" };
        return Err(Error::format(path, format!("missing tensor `{prefix}{}`", state.names[i % n])));
    }
    Ok((state, ema))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            image_size: 8,
            width: 2,
            proj_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn random_image(seed: u64, s: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(s, s, (0..3 * s * s).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = small();
        let m = ModelState::init(&cfg, 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = m.bind(&mut tape, true);
        let imgs = [random_image(1, 8), random_image(2, 8)];
        let x = m.batch_var(&mut tape, &imgs.iter().collect::<Vec<_>>()).unwrap();
        let fb = m.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(fb.feat_a), &[2, 8, 1, 1]);
        assert_eq!(tape.shape(fb.feat_b), &[2, 8]);
        assert_eq!(tape.shape(fb.logits), &[2, 3]);
        assert_eq!(tape.shape(fb.proj), &[2, 5]);
        let r = m.rot_forward(&mut tape, &vars, fb.feat_b).unwrap();
        assert_eq!(tape.shape(r), &[2, 4]);
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let m = ModelState::init(&small(), 2).unwrap();
        let z = Image::filled(8, 8, 0.0);
        let inf = m.infer(&[&z, &z, &z]).unwrap();
        assert_eq!(inf.feat_b[..8], inf.feat_b[8..16]);
        assert_eq!(inf.logits[..3], inf.logits[6..9]);
    }

    #[test]
    fn batch_equals_per_sample() {
        let m = ModelState::init(&small(), 3).unwrap();
        let a = random_image(4, 8);
        let b = random_image(5, 8);
        let both = m.infer(&[&a, &b]).unwrap();
        let one = m.infer(&[&b]).unwrap();
        for (x, y) in both.logits[3..].iter().zip(&one.logits) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = ModelState::init(&small(), 3).unwrap();
        let err = m.infer(&[&Image::filled(16, 16, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn placement_b_and_no_head_change_projection_width() {
        let cfg = ModelConfig { placement: Placement::B, proj_head: ProjHead::None, ..small() };
        assert_eq!(cfg.proj_out(), 8);
        let cfg = ModelConfig { image_size: 32, width: 8, proj_head: ProjHead::None, ..small() };
        assert_eq!(cfg.proj_out(), 32 * 16);
        let m = ModelState::init(&ModelConfig { proj_head: ProjHead::Mlp, ..small() }, 0).unwrap();
        assert!(m.param("proj.w2").is_some());
    }

    #[test]
    fn ema_arithmetic() {
        let cfg = small();
        let mut m = ModelState::init(&cfg, 0).unwrap();
        let mut ema = EmaState::new(&m, 0.9).unwrap();
        ema.shadow_mut().iter_mut().for_each(|s| s.fill(1.0));
        m.params_mut().iter_mut().for_each(|p| p.data_mut().fill(2.0));
        let before = m.checksum();
        ema_update(&mut ema, &m, 0.9).unwrap();
        assert_eq!(m.checksum(), before);
        assert!((ema.shadow()[0][0] - 1.1).abs() < 1e-12);
        assert!(ema_update(&mut ema, &m, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let m = ModelState::init(&cfg, 7).unwrap();
        let mut ema = EmaState::new(&m, 0.99).unwrap();
        ema.shadow_mut()[0][0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &m, &ema).unwrap();
        let (m2, ema2) = load_checkpoint(&path, &cfg, 0.99).unwrap();
        assert_eq!(m.checksum(), m2.checksum());
        assert_eq!(ema2.shadow()[0][0], 0.25);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CRMT");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path, &cfg, 0.99), Err(Error::Format { .. })));
        let other = ModelConfig { width: 3, ..cfg };
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, &other, 0.99).is_err());
    }
}
