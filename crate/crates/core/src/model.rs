//! The siamese change-detection network and its checkpoint container.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::casd::ChangeModel;
use crate::error::{ensure, Error, Result};
use crate::normalization::DsbnLayer;
use crate::params::{he_normal, Ctx, DomainId, NormUpdate, ParamId, ParamRole, ParamStore};
use crate::rng::{derive_seed, Xoshiro256};
use crate::routing::{apply_primitive, Ar2Block, BlockKind, DomainEmbedding, GateMode, MdrBlock, Primitive, Projection, RoutingDecision, DOMAIN_DIM};
use crate::tensor::{Tensor, Var};

pub const N_STAGES: usize = 4;
/// The stem halves the resolution; stage 1 keeps it and stages 2–4 halve it again.
pub const STEM_STRIDE: usize = 2;

fn stage_kernel(stage: usize) -> usize {
    if stage == 1 {
        3
    } else {
        2
    }
}

/// How the two branches are fused at every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Routed choice among the three primitives.
    Mdr,
    /// Raw channel concatenation, no projection.
    ConcatOnly,
    SubOnly,
    CatOnly,
    MulOnly,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Mdr => "mdr",
            Fusion::ConcatOnly => "concat_only",
            Fusion::SubOnly => "sub_only",
            Fusion::CatOnly => "cat_only",
            Fusion::MulOnly => "mul_only",
        }
    }

    fn static_primitive(self) -> Option<Primitive> {
        match self {
            Fusion::SubOnly => Some(Primitive::Sub),
            Fusion::CatOnly => Some(Primitive::Cat),
            Fusion::MulOnly => Some(Primitive::Mul),
            _ => None,
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdr" => Ok(Fusion::Mdr),
            "concat_only" => Ok(Fusion::ConcatOnly),
            "sub_only" => Ok(Fusion::SubOnly),
            "cat_only" => Ok(Fusion::CatOnly),
            "mul_only" => Ok(Fusion::MulOnly),
            other => Err(Error::Usage(format!("unknown fusion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stem_width: usize,
    pub widths: [usize; N_STAGES],
    /// 1-based stage indices carrying a receptive-field mixture.
    pub ar2_stages: Vec<usize>,
    pub fusion: Fusion,
    pub gate_mode: GateMode,
    pub gumbel_tau: f64,
    pub grid_pool: usize,
    pub decoder_width: usize,
    pub n_domains: usize,
    pub domain_dim: usize,
    pub zero_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            widths: [16, 32, 64, 128],
            ar2_stages: vec![2, 3, 4],
            fusion: Fusion::Mdr,
            gate_mode: GateMode::SteHard,
            gumbel_tau: 1.0,
            grid_pool: 1,
            decoder_width: 32,
            n_domains: 3,
            domain_dim: DOMAIN_DIM,
            zero_head: false,
        }
    }
}

impl ModelConfig {
    /// `key = value` lines; the inverse of [`ModelConfig::apply`].
    pub fn to_lines(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("model.stem_width".into(), self.stem_width.to_string()),
            ("model.widths".into(), join(&self.widths)),
            ("model.ar2_stages".into(), join(&self.ar2_stages)),
            ("model.fusion".into(), self.fusion.to_string()),
            ("model.gate_mode".into(), self.gate_mode.to_string()),
            ("model.gumbel_tau".into(), format!("{:?}", self.gumbel_tau)),
            ("model.grid_pool".into(), self.grid_pool.to_string()),
            ("model.decoder_width".into(), self.decoder_width.to_string()),
            ("model.n_domains".into(), self.n_domains.to_string()),
            ("model.domain_dim".into(), self.domain_dim.to_string()),
            ("model.zero_head".into(), self.zero_head.to_string()),
        ]
    }

    /// Sets one `model.*` key. Returns `Ok(false)` for keys outside this section.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key}: invalid {what} {value:?}"));
        let usize_list = |v: &str| -> Result<Vec<usize>> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad("integer list"))).collect()
        };
        let uint = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("integer"));
        match key {
            "model.stem_width" => self.stem_width = uint(value)?,
            "model.widths" => {
                let v = usize_list(value)?;
                self.widths = v.try_into().map_err(|_| bad("4-entry width list"))?;
            }
            "model.ar2_stages" => self.ar2_stages = usize_list(value)?,
            "model.fusion" => self.fusion = value.trim().parse().map_err(|_| bad("fusion"))?,
            "model.gate_mode" => self.gate_mode = value.trim().parse().map_err(|_| bad("gate mode"))?,
            "model.gumbel_tau" => self.gumbel_tau = value.trim().parse().map_err(|_| bad("float"))?,
            "model.grid_pool" => self.grid_pool = uint(value)?,
            "model.decoder_width" => self.decoder_width = uint(value)?,
            "model.n_domains" => self.n_domains = uint(value)?,
            "model.domain_dim" => self.domain_dim = uint(value)?,
            "model.zero_head" => self.zero_head = value.trim().parse().map_err(|_| bad("bool"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.ar2_stages.iter().any(|&s| !(1..=N_STAGES).contains(&s)) {
            return cfg(format!("model.ar2_stages must lie in 1..={N_STAGES}"));
        }
        if self.widths.iter().chain([&self.stem_width, &self.decoder_width]).any(|&w| w == 0) {
            return cfg("model widths must be positive".into());
        }
        if self.n_domains == 0 || self.domain_dim == 0 {
            return cfg("model.n_domains and model.domain_dim must be positive".into());
        }
        if !(self.grid_pool.is_power_of_two()) {
            return cfg("model.grid_pool must be a power of two".into());
        }
        if self.gumbel_tau.is_nan() || self.gumbel_tau <= 0.0 {
            return cfg("model.gumbel_tau must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum FusionBlock {
    Routed(MdrBlock),
    Static(Primitive, Projection),
    Concat,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: ParamId,
    norm: DsbnLayer,
    ar2: Option<Ar2Block>,
}

/// Per-forward results.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Change logits `[B, 1, H, W]`.
    pub logits: Var,
    /// Encoder features `(F_s^1, F_s^2)` per stage, after any routed block.
    pub features: Vec<(Var, Var)>,
    /// Receptive-field decisions (stage order), then difference decisions.
    pub decisions: Vec<RoutingDecision>,
}

/// Siamese encoder with routed blocks, per-stage fusion and a top-down decoder.
#[derive(Debug, Clone)]
pub struct UniRouteNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    embedding: DomainEmbedding,
    stem: ParamId,
    stem_norm: DsbnLayer,
    stages: Vec<EncoderStage>,
    fusion: Vec<FusionBlock>,
    adapters: Vec<Projection>,
    stem_adapter: Projection,
    refine_dw: ParamId,
    refine_pw: Projection,
    head: Projection,
}

impl UniRouteNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256::seed_from(derive_seed(seed, 0x1417));
        let mut store = ParamStore::new();
        let nd = config.n_domains;
        let embedding = DomainEmbedding::new(&mut store, nd, config.domain_dim, &mut rng);
        let sw = config.stem_width;
        let stem = store.add("stem.conv", ParamRole::Weight, he_normal(vec![sw, 3, 2, 2], 12, &mut rng));
        let stem_norm = DsbnLayer::new(&mut store, "stem.norm", 0, sw, nd);
        let mut stages = Vec::with_capacity(N_STAGES);
        let mut prev = sw;
        for (i, &c) in config.widths.iter().enumerate() {
            let s = i + 1;
            let k = stage_kernel(s);
            let down = store.add(format!("stage{s}.down"), ParamRole::Weight, he_normal(vec![c, prev, k, k], k * k * prev, &mut rng));
            let norm = DsbnLayer::new(&mut store, &format!("stage{s}.norm"), s, c, nd);
            let ar2 = config.ar2_stages.contains(&s).then(|| {
                let mut b = Ar2Block::new(&mut store, &format!("stage{s}.ar2"), c, embedding, &mut rng);
                b.gate.mode = config.gate_mode;
                b.gate.tau = config.gumbel_tau;
                b.gate.pool = config.grid_pool;
                b
            });
            stages.push(EncoderStage { down, norm, ar2 });
            prev = c;
        }
        let mut fusion = Vec::with_capacity(N_STAGES);
        let mut adapters = Vec::with_capacity(N_STAGES);
        let dw = config.decoder_width;
        for (i, &c) in config.widths.iter().enumerate() {
            let s = i + 1;
            let (block, fused_width) = match config.fusion {
                Fusion::ConcatOnly => (FusionBlock::Concat, 2 * c),
                f => match f.static_primitive() {
                    Some(p) => {
                        let proj = Projection::new(&mut store, &format!("stage{s}.p_{}", p.as_str()), p.input_width(c), c, &mut rng);
                        (FusionBlock::Static(p, proj), c)
                    }
                    None => {
                        let mut b = MdrBlock::new(&mut store, &format!("stage{s}.mdr"), c, embedding, &mut rng);
                        b.gate.mode = config.gate_mode;
                        b.gate.tau = config.gumbel_tau;
                        b.gate.pool = config.grid_pool;
                        (FusionBlock::Routed(b), c)
                    }
                },
            };
            fusion.push(block);
            adapters.push(Projection::new(&mut store, &format!("dec.adapter{s}"), fused_width, dw, &mut rng));
        }
        let stem_adapter = Projection::new(&mut store, "dec.stem_adapter", 2 * sw, dw, &mut rng);
        let refine_dw = store.add("dec.refine_dw", ParamRole::Weight, he_normal(vec![dw, 1, 3, 3], 9, &mut rng));
        let refine_pw = Projection::new(&mut store, "dec.refine_pw", dw, dw, &mut rng);
        let head = Projection::new(&mut store, "dec.head", dw, STEM_STRIDE * STEM_STRIDE, &mut rng);
        if config.zero_head {
            let z = Tensor::zeros(store.get(head.w).shape().to_vec());
            store.set(head.w, z)?;
        }
        Ok(Self {
            config,
            params: store,
            embedding,
            stem,
            stem_norm,
            stages,
            fusion,
            adapters,
            stem_adapter,
            refine_dw,
            refine_pw,
            head,
        })
    }

    /// Number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn n_ar2_blocks(&self) -> usize {
        self.stages.iter().filter(|s| s.ar2.is_some()).count()
    }

    pub fn n_mdr_blocks(&self) -> usize {
        self.fusion.iter().filter(|f| matches!(f, FusionBlock::Routed(_))).count()
    }

    pub fn embedding(&self) -> DomainEmbedding {
        self.embedding
    }

    /// Receptive-field block of a 1-based stage, if present.
    pub fn ar2_block(&self, stage: usize) -> Option<&Ar2Block> {
        self.stages.get(stage.wrapping_sub(1)).and_then(|s| s.ar2.as_ref())
    }

    /// Routed fusion block of a 1-based stage, if present.
    pub fn mdr_block(&self, stage: usize) -> Option<&MdrBlock> {
        match self.fusion.get(stage.wrapping_sub(1)) {
            Some(FusionBlock::Routed(b)) => Some(b),
            _ => None,
        }
    }

    pub fn head(&self) -> Projection {
        self.head
    }

    /// Spatial resolution of each routed block's decision for an `h × w` input,
    /// in decision order.
    pub fn decision_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let pool = self.config.grid_pool;
        let at = |s: usize| (h >> s, w >> s);
        let mut out: Vec<(usize, usize)> = (1..=N_STAGES).filter(|&s| self.ar2_block(s).is_some()).map(at).collect();
        out.extend((1..=N_STAGES).filter(|&s| self.mdr_block(s).is_some()).map(at));
        out.into_iter().map(|(a, b)| (a / pool, b / pool)).collect()
    }

    /// Names of the routed blocks in decision order (`ar2.s2`, `mdr.s1`, ...).
    pub fn routed_block_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=N_STAGES).filter(|&s| self.ar2_block(s).is_some()).map(|s| format!("ar2.s{s}")).collect();
        out.extend((1..=N_STAGES).filter(|&s| self.mdr_block(s).is_some()).map(|s| format!("mdr.s{s}")));
        out
    }

    /// Kinds of the routed blocks in decision order.
    pub fn decision_kinds(&self) -> Vec<BlockKind> {
        let mut out = vec![BlockKind::Ar2; self.n_ar2_blocks()];
        out.extend(vec![BlockKind::Mdr; self.n_mdr_blocks()]);
        out
    }

    fn dsbn_layers_mut(&mut self) -> impl Iterator<Item = &mut DsbnLayer> {
        std::iter::once(&mut self.stem_norm).chain(self.stages.iter_mut().map(|s| &mut s.norm))
    }

    pub fn dsbn_layers(&self) -> impl Iterator<Item = &DsbnLayer> {
        std::iter::once(&self.stem_norm).chain(self.stages.iter().map(|s| &s.norm))
    }

    /// Applies statistics queued by a training-mode forward.
    pub fn commit_norm_updates(&mut self, updates: &[NormUpdate]) -> Result<()> {
        for u in updates {
            let layer = self
                .dsbn_layers_mut()
                .find(|l| l.key == u.layer)
                .ok_or_else(|| Error::Contract(format!("no normalization layer {}", u.layer)))?;
            layer.apply(u)?;
        }
        Ok(())
    }

    fn encode(&self, ctx: &mut Ctx, x: Var, domains: &[DomainId], domain: DomainId) -> Result<(Var, Vec<Var>, Vec<RoutingDecision>)> {
        let w = ctx.p(self.stem);
        let h = ctx.tape.conv2d(x, w, None, STEM_STRIDE, 0)?;
        let h = self.stem_norm.forward(ctx, h, domains)?;
        let stem = ctx.tape.relu(h);
        let mut feats = Vec::with_capacity(N_STAGES);
        let mut decisions = Vec::new();
        let mut cur = stem;
        for (i, st) in self.stages.iter().enumerate() {
            let w = ctx.p(st.down);
            let h = if i == 0 { ctx.tape.conv2d(cur, w, None, 1, 1)? } else { ctx.tape.conv2d(cur, w, None, 2, 0)? };
            let h = st.norm.forward(ctx, h, domains)?;
            let mut h = ctx.tape.relu(h);
            if let Some(block) = &st.ar2 {
                let (y, d) = block.forward(ctx, h, domain)?;
                decisions.push(d);
                h = y;
            }
            feats.push(h);
            cur = h;
        }
        Ok((stem, feats, decisions))
    }

    /// Full forward pass. `t1`, `t2`: `[B, 3, H, W]` with `H`, `W` divisible by 16.
    pub fn forward(&self, ctx: &mut Ctx, t1: Var, t2: Var, domain: DomainId) -> Result<ForwardOutput> {
        let s1 = ctx.tape.shape(t1).to_vec();
        ensure!(s1 == ctx.tape.shape(t2), "forward: epoch shapes {:?} and {:?} differ", s1, ctx.tape.shape(t2));
        ensure!(s1.len() == 4 && s1[1] == 3, "forward: expected [B,3,H,W], got {:?}", s1);
        ensure!(s1[2] % 16 == 0 && s1[3] % 16 == 0 && s1[2] > 0 && s1[3] > 0, "forward: spatial size {}x{} not divisible by 16", s1[2], s1[3]);
        self.embedding.check(domain)?;
        let b = s1[0];
        let both = ctx.tape.concat_batch(t1, t2)?;
        let domains = vec![domain; 2 * b];
        let (stem, feats, mut decisions) = self.encode(ctx, both, &domains, domain)?;
        let mut features = Vec::with_capacity(N_STAGES);
        for &f in &feats {
            let a = ctx.tape.slice_batch(f, 0, b)?;
            let c = ctx.tape.slice_batch(f, b, b)?;
            features.push((a, c));
        }
        let mut fused = Vec::with_capacity(N_STAGES);
        for (block, &(f1, f2)) in self.fusion.iter().zip(&features) {
            let m = match block {
                FusionBlock::Routed(mdr) => {
                    let (m, d) = mdr.forward(ctx, f1, f2, domain)?;
                    decisions.push(d);
                    m
                }
                FusionBlock::Static(p, proj) => apply_primitive(ctx, *p, *proj, f1, f2)?,
                FusionBlock::Concat => ctx.tape.concat_channels(f1, f2)?,
            };
            fused.push(m);
        }
        let mut d = self.adapters[N_STAGES - 1].apply(ctx, fused[N_STAGES - 1])?;
        d = ctx.tape.relu(d);
        for s in (0..N_STAGES - 1).rev() {
            let up = ctx.tape.upsample2x(d)?;
            let lateral = self.adapters[s].apply(ctx, fused[s])?;
            let sum = ctx.tape.add(up, lateral)?;
            d = ctx.tape.relu(sum);
        }
        let st1 = ctx.tape.slice_batch(stem, 0, b)?;
        let st2 = ctx.tape.slice_batch(stem, b, b)?;
        let skip = ctx.tape.concat_channels(st1, st2)?;
        let skip = self.stem_adapter.apply(ctx, skip)?;
        let r = ctx.tape.add(d, skip)?;
        let r = ctx.tape.relu(r);
        let rw = ctx.p(self.refine_dw);
        let q = ctx.tape.depthwise_conv(r, rw, 1)?;
        let q = self.refine_pw.apply(ctx, q)?;
        let q = ctx.tape.relu(q);
        let r = ctx.tape.add(r, q)?;
        let sub = self.head.apply(ctx, r)?;
        let logits = ctx.tape.depth_to_space(sub, STEM_STRIDE)?;
        Ok(ForwardOutput {
            logits,
            features,
            decisions,
        })
    }

    /// Eval-mode logits without gradient recording.
    pub fn logits(&self, t1: &Tensor, t2: &Tensor, domain: DomainId) -> Result<Tensor> {
        let mut ctx = Ctx::eval(&self.params);
        let (a, b) = (ctx.tape.constant(t1.clone()), ctx.tape.constant(t2.clone()));
        let out = self.forward(&mut ctx, a, b, domain)?;
        Ok(ctx.tape.value(out.logits).clone())
    }

    /// Binary change map `σ(logit) > threshold`.
    pub fn predict(&self, t1: &Tensor, t2: &Tensor, domain: DomainId, threshold: f64) -> Result<Tensor> {
        Ok(binarize(&self.logits(t1, t2, domain)?, threshold))
    }

    /// Writes the checkpoint container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &[usize], &[f64])> = Vec::new();
        for id in self.params.ids() {
            let t = self.params.get(id);
            entries.push((format!("param:{}", self.params.name(id)), t.shape(), t.data()));
        }
        let stat_shapes: Vec<[usize; 1]> = self.dsbn_layers().map(|l| [l.channels]).collect();
        for (layer, shape) in self.dsbn_layers().zip(&stat_shapes) {
            for (d, rs) in layer.running.iter().enumerate() {
                entries.push((format!("stat:{}.mean{}", layer.key, d), shape, &rs.mean));
                entries.push((format!("stat:{}.var{}", layer.key, d), shape, &rs.var));
            }
        }
        let config: String = self.config.to_lines().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let bytes = checkpoint::encode(&config, &entries);
        write_atomic(path, &bytes)
    }

    /// Reads a checkpoint written by [`UniRouteNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = checkpoint::decode(&bytes)?;
        let mut config = ModelConfig::default();
        for line in ck.config.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format("checkpoint", format!("bad config line {line:?}")))?;
            if !config.apply(k.trim(), v.trim())? {
                return Err(Error::format("checkpoint", format!("unknown config key {:?}", k.trim())));
            }
        }
        let mut net = Self::new(config, 0)?;
        let mut seen = 0usize;
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = format!("param:{}", net.params.name(id));
            let (shape, data) = ck.entries.get(&name).ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))?;
            let t = Tensor::new(shape.clone(), data.clone()).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            net.params.set(id, t).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            seen += 1;
        }
        for layer in net.dsbn_layers_mut() {
            let key = layer.key;
            let channels = layer.channels;
            for (d, rs) in layer.running.iter_mut().enumerate() {
                for (suffix, dst) in [("mean", &mut rs.mean), ("var", &mut rs.var)] {
                    let name = format!("stat:{key}.{suffix}{d}");
                    let (shape, data) = ck.entries.get(&name).ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))?;
                    if shape.as_slice() != [channels] {
                        return Err(Error::format("checkpoint", format!("{name}: shape {shape:?}")));
                    }
                    dst.clone_from(data);
                    seen += 1;
                }
            }
        }
        if seen != ck.entries.len() {
            return Err(Error::format("checkpoint", format!("{} unrecognized entries", ck.entries.len() - seen)));
        }
        Ok(net)
    }

    /// Copies parameter values and running statistics from a network with
    /// the same architecture.
    pub fn copy_state_from(&mut self, other: &UniRouteNet) -> Result<()> {
        ensure!(self.config == other.config, "copy_state_from: configurations differ");
        self.params = other.params.clone();
        for (dst, src) in self.dsbn_layers_mut().zip(other.dsbn_layers()) {
            dst.running.clone_from(&src.running);
        }
        Ok(())
    }
}

pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|l| if crate::tensor::sigmoid_scalar(l) > threshold { 1.0 } else { 0.0 })
}

impl ChangeModel for UniRouteNet {
    fn predict_probs(&self, t1: &Tensor, t2: &Tensor, domain: DomainId) -> Result<Tensor> {
        Ok(self.logits(t1, t2, domain)?.map(crate::tensor::sigmoid_scalar))
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The "URKT" container: magic, version, config text, manifest, blob.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"URKT";
    pub const VERSION: u32 = 1;

    pub struct Decoded {
        pub config: String,
        pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    }

    pub fn encode(config: &str, entries: &[(String, &[usize], &[f64])]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, data) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape.iter() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, _, data) in entries {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
            let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
            let s = &self.buf[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        fn string(&mut self) -> Result<String> {
            let n = self.u32()? as usize;
            String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "non-UTF-8 text"))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Decoded> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let total = r.u64()? as usize;
        let blob = r.take(total.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "blob size overflow"))?)?;
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let mut entries = BTreeMap::new();
        for (name, shape, offset) in manifest {
            let len: usize = shape.iter().product();
            if offset + len > total {
                return Err(Error::format("checkpoint", format!("{name}: blob range out of bounds")));
            }
            let data = blob[offset * 8..(offset + len) * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if entries.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate entry {name}")));
            }
        }
        Ok(Decoded { config, entries })
    }
}
