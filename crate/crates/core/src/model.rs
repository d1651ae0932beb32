//! Dual-stream attention velocity network.
//!
//! The main stream consumes the noisy latent channel-concatenated with the
//! person grid; the garment stream consumes the garment grid with its own
//! weights. The streams interact only through joint self-attention over the
//! concatenation of both token sets. Each block is modulated by a learned
//! function of the path time (shift, scale and gate per sub-layer), with the
//! modulation maps initialized to zero so every block starts as the
//! identity.
//!
//! Parameter count (C channels, p patch, D token dim, T tokens per stream,
//! F time features, depth B):
//!   time MLP:        F*D + D + D*D + D
//!   input proj:      (2*C*p^2)*D + D  (main)  +  (C*p^2)*D + D  (garment)
//!   positions:       2*T*D            (only with learned_positions)
//!   per block/stream: 6*D^2 + 6*D (mod) + 4*D^2 + 4*D (attn) + 8*D^2 + 5*D (mlp)
//!   output proj:     2*(D*C*p^2 + C*p^2)
//! summed over 2 streams and B blocks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::VelocityField;
use crate::grid::{GridShape, LatentGrid, PathTime};
use crate::rng::stream_rng;
use crate::tape::{Matrix, NodeId, Tape};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UncondMode {
    #[default]
    ZeroGarment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Number of sinusoidal frequency pairs in the time embedding.
    pub time_freqs: usize,
    /// Learned per-token positional tables on both streams. Off by default;
    /// content-only attention is translation-equivariant, which the
    /// translation tests rely on.
    pub learned_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            patch_size: 4,
            token_dim: 64,
            heads: 4,
            depth: 3,
            time_freqs: 8,
            learned_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.height == 0
            || self.width == 0
            || self.patch_size == 0
            || self.token_dim == 0
            || self.heads == 0
            || self.depth == 0
            || self.time_freqs == 0
        {
            return Err(CoreError::Config("model dimensions must be positive".into()));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(CoreError::Config(format!(
                "grid {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "token dim {} not divisible by head count {}",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.channels, self.height, self.width)
    }

    pub fn tokens_per_stream(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim_garment(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn patch_dim_main(&self) -> usize {
        2 * self.patch_dim_garment()
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn build_layout(config: &ModelConfig) -> (Vec<ParamSpec>, usize) {
    let d = config.token_dim;
    let f = 2 * config.time_freqs;
    let t = config.tokens_per_stream();
    let mut specs = Vec::new();
    let mut offset = 0usize;
    let mut push = |specs: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize| {
        specs.push(ParamSpec {
            name,
            offset,
            rows,
            cols,
        });
        offset += rows * cols;
    };
    push(&mut specs, "time.w1".into(), f, d);
    push(&mut specs, "time.b1".into(), 1, d);
    push(&mut specs, "time.w2".into(), d, d);
    push(&mut specs, "time.b2".into(), 1, d);
    push(&mut specs, "main.in.w".into(), config.patch_dim_main(), d);
    push(&mut specs, "main.in.b".into(), 1, d);
    push(&mut specs, "garment.in.w".into(), config.patch_dim_garment(), d);
    push(&mut specs, "garment.in.b".into(), 1, d);
    if config.learned_positions {
        push(&mut specs, "main.pos".into(), t, d);
        push(&mut specs, "garment.pos".into(), t, d);
    }
    for block in 0..config.depth {
        for stream in ["main", "garment"] {
            let prefix = format!("{stream}.block{block}");
            push(&mut specs, format!("{prefix}.mod.w"), d, 6 * d);
            push(&mut specs, format!("{prefix}.mod.b"), 1, 6 * d);
            push(&mut specs, format!("{prefix}.attn.wq"), d, d);
            push(&mut specs, format!("{prefix}.attn.bq"), 1, d);
            push(&mut specs, format!("{prefix}.attn.wk"), d, d);
            push(&mut specs, format!("{prefix}.attn.bk"), 1, d);
            push(&mut specs, format!("{prefix}.attn.wv"), d, d);
            push(&mut specs, format!("{prefix}.attn.bv"), 1, d);
            push(&mut specs, format!("{prefix}.attn.wo"), d, d);
            push(&mut specs, format!("{prefix}.attn.bo"), 1, d);
            push(&mut specs, format!("{prefix}.mlp.w1"), d, 4 * d);
            push(&mut specs, format!("{prefix}.mlp.b1"), 1, 4 * d);
            push(&mut specs, format!("{prefix}.mlp.w2"), 4 * d, d);
            push(&mut specs, format!("{prefix}.mlp.b2"), 1, d);
        }
    }
    push(&mut specs, "main.out.w".into(), d, config.patch_dim_garment());
    push(&mut specs, "main.out.b".into(), 1, config.patch_dim_garment());
    push(&mut specs, "garment.out.w".into(), d, config.patch_dim_garment());
    push(&mut specs, "garment.out.b".into(), 1, config.patch_dim_garment());
    (specs, offset)
}

/// Closed-form parameter count; kept next to the layout so the two are
/// checked against each other in tests.
pub fn param_count_formula(config: &ModelConfig) -> usize {
    let d = config.token_dim;
    let f = 2 * config.time_freqs;
    let t = config.tokens_per_stream();
    let cp2 = config.patch_dim_garment();
    let time = f * d + d + d * d + d;
    let input = (2 * cp2) * d + d + cp2 * d + d;
    let pos = if config.learned_positions { 2 * t * d } else { 0 };
    let per_stream_block = 6 * d * d + 6 * d + 4 * d * d + 4 * d + 8 * d * d + 5 * d;
    let output = 2 * (d * cp2 + cp2);
    time + input + pos + config.depth * 2 * per_stream_block + output
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub velocity: LatentGrid,
    pub garment_out: LatentGrid,
}

/// Tape node handles of one forward evaluation.
pub struct ForwardNodes {
    pub velocity: NodeId,
    pub garment_out: NodeId,
    /// Main-stream token state after the input projection.
    pub input_main: NodeId,
    /// Main-stream token state after each block, for distillation taps.
    pub hidden_main: Vec<NodeId>,
}

/// Parameter leaves of one model on one tape. Bindings from
/// [`VelocityModel::bind`] accumulate gradients; bindings from
/// [`VelocityModel::bind_frozen`] are constants.
pub struct ModelBinding {
    ids: Vec<NodeId>,
}

pub struct VelocityModel {
    config: ModelConfig,
    uncond_mode: UncondMode,
    seed: u64,
    step: u64,
    params: Vec<f64>,
    layout: Vec<ParamSpec>,
    by_name: HashMap<String, usize>,
    patch_map_main: Arc<Vec<usize>>,
    patch_map_garment: Arc<Vec<usize>>,
    unpatch_map: Arc<Vec<usize>>,
}

impl Clone for VelocityModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            uncond_mode: self.uncond_mode,
            seed: self.seed,
            step: self.step,
            params: self.params.clone(),
            layout: self.layout.clone(),
            by_name: self.by_name.clone(),
            patch_map_main: Arc::clone(&self.patch_map_main),
            patch_map_garment: Arc::clone(&self.patch_map_garment),
            unpatch_map: Arc::clone(&self.unpatch_map),
        }
    }
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<VelocityModel> {
    config.validate()?;
    let (layout, total) = build_layout(config);
    let mut params = vec![0.0; total];
    for (index, spec) in layout.iter().enumerate() {
        let values = &mut params[spec.offset..spec.offset + spec.len()];
        let is_bias = spec.rows == 1 && !spec.name.ends_with(".pos");
        if spec.name.contains(".mod.") || is_bias {
            // Modulation tensors and every bias start at zero.
            continue;
        }
        let mut rng = stream_rng(seed, "init", index as u64);
        if spec.name.ends_with(".pos") {
            for v in values.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = 0.02 * z;
            }
        } else {
            let std = 1.0 / (spec.rows as f64).sqrt();
            for v in values.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
    }
    let by_name = layout
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.clone(), i))
        .collect();
    let (patch_map_main, patch_map_garment, unpatch_map) = build_maps(config);
    Ok(VelocityModel {
        config: config.clone(),
        uncond_mode: UncondMode::ZeroGarment,
        seed,
        step: 0,
        params,
        layout,
        by_name,
        patch_map_main: Arc::new(patch_map_main),
        patch_map_garment: Arc::new(patch_map_garment),
        unpatch_map: Arc::new(unpatch_map),
    })
}

fn build_maps(config: &ModelConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (c, h, w, p) = (
        config.channels,
        config.height,
        config.width,
        config.patch_size,
    );
    let tokens = config.tokens_per_stream();
    let wp = w / p;
    let grid_len = c * h * w;
    let flat = |ch: usize, row: usize, col: usize| (ch * h + row) * w + col;

    let mut garment_map = Vec::with_capacity(tokens * c * p * p);
    let mut main_map = Vec::with_capacity(tokens * 2 * c * p * p);
    for token in 0..tokens {
        let (pr, pc) = (token / wp, token % wp);
        for ch in 0..2 * c {
            for r_in in 0..p {
                for c_in in 0..p {
                    let (row, col) = (pr * p + r_in, pc * p + c_in);
                    let src = if ch < c {
                        flat(ch, row, col)
                    } else {
                        grid_len + flat(ch - c, row, col)
                    };
                    main_map.push(src);
                    if ch < c {
                        garment_map.push(src);
                    }
                }
            }
        }
    }

    let patch_dim = c * p * p;
    let mut unpatch_map = Vec::with_capacity(grid_len);
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let token = (row / p) * wp + col / p;
                let within = ch * p * p + (row % p) * p + col % p;
                unpatch_map.push(token * patch_dim + within);
            }
        }
    }
    (main_map, garment_map, unpatch_map)
}

struct StreamIds {
    mod_w: NodeId,
    mod_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl VelocityModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn uncond_mode(&self) -> UncondMode {
        self.uncond_mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.by_name.get(name).map(|&i| &self.layout[i])
    }

    /// Binds all parameters as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        self.bind_impl(tape, true)
    }

    /// Binds all parameters as constants; gradients stop here (frozen
    /// teacher).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ModelBinding {
        self.bind_impl(tape, false)
    }

    fn bind_impl(&self, tape: &mut Tape, tracked: bool) -> ModelBinding {
        let ids = self
            .layout
            .iter()
            .map(|spec| {
                let m = Matrix {
                    rows: spec.rows,
                    cols: spec.cols,
                    data: self.params[spec.offset..spec.offset + spec.len()].to_vec(),
                };
                if tracked {
                    tape.param(m, spec.offset)
                } else {
                    tape.constant(m)
                }
            })
            .collect();
        ModelBinding { ids }
    }

    fn node(&self, binding: &ModelBinding, name: &str) -> NodeId {
        binding.ids[self.by_name[name]]
    }

    fn stream_ids(&self, binding: &ModelBinding, stream: &str, block: usize) -> StreamIds {
        let p = format!("{stream}.block{block}");
        StreamIds {
            mod_w: self.node(binding, &format!("{p}.mod.w")),
            mod_b: self.node(binding, &format!("{p}.mod.b")),
            wq: self.node(binding, &format!("{p}.attn.wq")),
            bq: self.node(binding, &format!("{p}.attn.bq")),
            wk: self.node(binding, &format!("{p}.attn.wk")),
            bk: self.node(binding, &format!("{p}.attn.bk")),
            wv: self.node(binding, &format!("{p}.attn.wv")),
            bv: self.node(binding, &format!("{p}.attn.bv")),
            wo: self.node(binding, &format!("{p}.attn.wo")),
            bo: self.node(binding, &format!("{p}.attn.bo")),
            w1: self.node(binding, &format!("{p}.mlp.w1")),
            b1: self.node(binding, &format!("{p}.mlp.b1")),
            w2: self.node(binding, &format!("{p}.mlp.w2")),
            b2: self.node(binding, &format!("{p}.mlp.b2")),
        }
    }

    /// Sinusoidal features of t (scaled by 1000) over a geometric frequency
    /// ladder; constant with respect to parameters.
    fn time_features(&self, t: f64) -> Matrix {
        let n = self.config.time_freqs;
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let exponent = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let freq = 1000.0 * (10_000.0f64).powf(-exponent);
            data.push((freq * t).sin());
            data.push((freq * t).cos());
        }
        Matrix::row_vec(data)
    }

    /// Runs the network on an existing tape. `x_row`, `person_row` and
    /// `garment_row` are `1 x (C*H*W)` nodes; outputs are the same layout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x_row: NodeId,
        person_row: NodeId,
        garment_row: NodeId,
        t: PathTime,
    ) -> Result<ForwardNodes> {
        t.require_velocity_domain()?;
        let grid_len = self.config.grid_shape().len();
        for (name, id) in [("x_t", x_row), ("person", person_row), ("garment", garment_row)] {
            let v = tape.value(id);
            if v.rows != 1 || v.cols != grid_len {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("1x{grid_len}"),
                    got: format!("{}x{}", v.rows, v.cols),
                    context: format!("forward input {name}"),
                });
            }
        }
        let tokens = self.config.tokens_per_stream();
        let d = self.config.token_dim;

        // Time embedding.
        let feat = tape.constant(self.time_features(t.value()));
        let h = tape.matmul(feat, self.node(binding, "time.w1"))?;
        let h = tape.add_row(h, self.node(binding, "time.b1"))?;
        let h = tape.silu(h);
        let h = tape.matmul(h, self.node(binding, "time.w2"))?;
        let temb = tape.add_row(h, self.node(binding, "time.b2"))?;

        // Patchify and project both streams.
        let main_concat = tape.concat_cols(&[x_row, person_row])?;
        let main_patches = tape.gather(
            main_concat,
            Arc::clone(&self.patch_map_main),
            tokens,
            self.config.patch_dim_main(),
        )?;
        let mut x_main = tape.matmul(main_patches, self.node(binding, "main.in.w"))?;
        x_main = tape.add_row(x_main, self.node(binding, "main.in.b"))?;
        let garment_patches = tape.gather(
            garment_row,
            Arc::clone(&self.patch_map_garment),
            tokens,
            self.config.patch_dim_garment(),
        )?;
        let mut x_garment = tape.matmul(garment_patches, self.node(binding, "garment.in.w"))?;
        x_garment = tape.add_row(x_garment, self.node(binding, "garment.in.b"))?;
        if self.config.learned_positions {
            x_main = tape.add(x_main, self.node(binding, "main.pos"))?;
            x_garment = tape.add(x_garment, self.node(binding, "garment.pos"))?;
        }
        let input_main = x_main;

        let mut hidden_main = Vec::with_capacity(self.config.depth);
        for block in 0..self.config.depth {
            let ids_m = self.stream_ids(binding, "main", block);
            let ids_g = self.stream_ids(binding, "garment", block);
            let mods_m = self.modulation(tape, &ids_m, temb, d)?;
            let mods_g = self.modulation(tape, &ids_g, temb, d)?;

            // Joint attention: per-stream QKV from modulated, normalized
            // tokens; softmax over the concatenation of both token sets.
            let hm = self.norm_modulate(tape, x_main, mods_m[0], mods_m[1])?;
            let hg = self.norm_modulate(tape, x_garment, mods_g[0], mods_g[1])?;
            let (qm, km, vm) = self.qkv(tape, &ids_m, hm)?;
            let (qg, kg, vg) = self.qkv(tape, &ids_g, hg)?;
            let q = tape.concat_rows(qm, qg)?;
            let k = tape.concat_rows(km, kg)?;
            let v = tape.concat_rows(vm, vg)?;
            let attn = self.joint_attention(tape, q, k, v)?;
            let attn_m = tape.slice_rows(attn, 0, tokens)?;
            let attn_g = tape.slice_rows(attn, tokens, tokens)?;
            x_main = self.attn_residual(tape, &ids_m, x_main, attn_m, mods_m[2])?;
            x_garment = self.attn_residual(tape, &ids_g, x_garment, attn_g, mods_g[2])?;

            x_main = self.mlp_residual(tape, &ids_m, x_main, mods_m[3], mods_m[4], mods_m[5])?;
            x_garment = self.mlp_residual(tape, &ids_g, x_garment, mods_g[3], mods_g[4], mods_g[5])?;

            if !tape.value(x_main).is_finite() || !tape.value(x_garment).is_finite() {
                return Err(CoreError::NonFinite {
                    what: format!("activations in block {block}"),
                    step: None,
                });
            }
            hidden_main.push(x_main);
        }

        let velocity = self.readout(tape, x_main, self.node(binding, "main.out.w"), self.node(binding, "main.out.b"))?;
        let garment_out = self.readout(
            tape,
            x_garment,
            self.node(binding, "garment.out.w"),
            self.node(binding, "garment.out.b"),
        )?;
        Ok(ForwardNodes {
            velocity,
            garment_out,
            input_main,
            hidden_main,
        })
    }

    /// Shift/scale/gate pairs for both sub-layers: `[shift1, scale1, gate1,
    /// shift2, scale2, gate2]`.
    fn modulation(
        &self,
        tape: &mut Tape,
        ids: &StreamIds,
        temb: NodeId,
        d: usize,
    ) -> Result<[NodeId; 6]> {
        let m = tape.matmul(temb, ids.mod_w)?;
        let m = tape.add_row(m, ids.mod_b)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            parts.push(tape.slice_cols(m, i * d, d)?);
        }
        Ok(parts.try_into().expect("exactly six slices"))
    }

    fn norm_modulate(
        &self,
        tape: &mut Tape,
        x: NodeId,
        shift: NodeId,
        scale: NodeId,
    ) -> Result<NodeId> {
        let n = tape.layernorm_rows(x);
        let gain = tape.affine(scale, 1.0, 1.0);
        let scaled = tape.mul_row(n, gain)?;
        tape.add_row(scaled, shift)
    }

    fn qkv(&self, tape: &mut Tape, ids: &StreamIds, h: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let q = tape.matmul(h, ids.wq)?;
        let q = tape.add_row(q, ids.bq)?;
        let k = tape.matmul(h, ids.wk)?;
        let k = tape.add_row(k, ids.bk)?;
        let v = tape.matmul(h, ids.wv)?;
        let v = tape.add_row(v, ids.bv)?;
        Ok((q, k, v))
    }

    fn joint_attention(&self, tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.softmax_rows(scores);
            heads.push(tape.matmul(probs, vh)?);
        }
        tape.concat_cols(&heads)
    }

    fn attn_residual(
        &self,
        tape: &mut Tape,
        ids: &StreamIds,
        x: NodeId,
        attn: NodeId,
        gate: NodeId,
    ) -> Result<NodeId> {
        let o = tape.matmul(attn, ids.wo)?;
        let o = tape.add_row(o, ids.bo)?;
        let gated = tape.mul_row(o, gate)?;
        tape.add(x, gated)
    }

    fn mlp_residual(
        &self,
        tape: &mut Tape,
        ids: &StreamIds,
        x: NodeId,
        shift: NodeId,
        scale: NodeId,
        gate: NodeId,
    ) -> Result<NodeId> {
        let h = self.norm_modulate(tape, x, shift, scale)?;
        let u = tape.matmul(h, ids.w1)?;
        let u = tape.add_row(u, ids.b1)?;
        let u = tape.silu(u);
        let m = tape.matmul(u, ids.w2)?;
        let m = tape.add_row(m, ids.b2)?;
        let gated = tape.mul_row(m, gate)?;
        tape.add(x, gated)
    }

    fn readout(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = tape.layernorm_rows(x);
        let o = tape.matmul(n, w)?;
        let o = tape.add_row(o, b)?;
        tape.gather(o, Arc::clone(&self.unpatch_map), 1, self.config.grid_shape().len())
    }

    fn check_grid(&self, grid: &LatentGrid, what: &str) -> Result<()> {
        if grid.shape() != self.config.grid_shape() {
            return Err(CoreError::ShapeMismatch {
                expected: self.config.grid_shape().to_string(),
                got: grid.shape().to_string(),
                context: format!("forward input {what}"),
            });
        }
        Ok(())
    }

    /// Gradient-free forward pass on a private tape.
    pub fn forward(
        &self,
        x_t: &LatentGrid,
        person: &LatentGrid,
        garment: &LatentGrid,
        t: PathTime,
    ) -> Result<ForwardOutput> {
        self.check_grid(x_t, "x_t")?;
        self.check_grid(person, "person")?;
        self.check_grid(garment, "garment")?;
        let mut tape = Tape::new();
        let binding = self.bind_frozen(&mut tape);
        let x = tape.constant(grid_to_row(x_t));
        let p = tape.constant(grid_to_row(person));
        let g = tape.constant(grid_to_row(garment));
        let nodes = self.forward_on_tape(&mut tape, &binding, x, p, g, t)?;
        Ok(ForwardOutput {
            velocity: row_to_grid(tape.value(nodes.velocity), self.config.grid_shape())?,
            garment_out: row_to_grid(tape.value(nodes.garment_out), self.config.grid_shape())?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            uncond_mode: self.uncond_mode,
            seed: self.seed,
            step: self.step,
            param_count: self.params.len(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut blob = Vec::with_capacity(8 + header_bytes.len() + 8 * self.params.len());
        blob.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        blob.extend_from_slice(&header_bytes);
        for v in &self.params {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &blob)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = fs::read(path)?;
        if blob.len() < 8 {
            return Err(CoreError::ArtifactMismatch(format!(
                "checkpoint {} is truncated",
                path.display()
            )));
        }
        let header_len = u64::from_le_bytes(blob[..8].try_into().unwrap()) as usize;
        if blob.len() < 8 + header_len {
            return Err(CoreError::ArtifactMismatch(format!(
                "checkpoint {} header is truncated",
                path.display()
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&blob[8..8 + header_len])?;
        header.config.validate()?;
        let (layout, total) = build_layout(&header.config);
        if header.param_count != total {
            return Err(CoreError::ArtifactMismatch(format!(
                "checkpoint declares {} parameters, config implies {total}",
                header.param_count
            )));
        }
        let body = &blob[8 + header_len..];
        if body.len() != 8 * total {
            return Err(CoreError::ArtifactMismatch(format!(
                "checkpoint body is {} bytes, expected {}",
                body.len(),
                8 * total
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::ArtifactMismatch(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        let by_name = layout
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        let (patch_map_main, patch_map_garment, unpatch_map) = build_maps(&header.config);
        Ok(Self {
            config: header.config,
            uncond_mode: header.uncond_mode,
            seed: header.seed,
            step: header.step,
            params,
            layout,
            by_name,
            patch_map_main: Arc::new(patch_map_main),
            patch_map_garment: Arc::new(patch_map_garment),
            unpatch_map: Arc::new(unpatch_map),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    uncond_mode: UncondMode,
    seed: u64,
    step: u64,
    param_count: usize,
}

pub fn grid_to_row(grid: &LatentGrid) -> Matrix {
    Matrix::row_vec(grid.values().to_vec())
}

pub fn row_to_grid(m: &Matrix, shape: GridShape) -> Result<LatentGrid> {
    LatentGrid::new(shape, m.data.clone())
}

/// Adapts a model plus fixed conditioning to the sampler-facing velocity
/// field interface.
pub struct ModelField<'a> {
    pub model: &'a VelocityModel,
    pub person: &'a LatentGrid,
    pub garment: &'a LatentGrid,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
        Ok(self
            .model
            .forward(x, self.person, self.garment, t)?
            .velocity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_normal_grid;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 3,
            height: 8,
            width: 8,
            patch_size: 2,
            token_dim: 16,
            heads: 2,
            depth: 2,
            time_freqs: 4,
            learned_positions: false,
        }
    }

    fn t(v: f64) -> PathTime {
        PathTime::new(v).unwrap()
    }

    fn inputs(config: &ModelConfig, seed: u64) -> (LatentGrid, LatentGrid, LatentGrid) {
        let shape = config.grid_shape();
        (
            seeded_normal_grid(seed, "x", 0, shape),
            seeded_normal_grid(seed, "person", 0, shape),
            seeded_normal_grid(seed, "garment", 0, shape),
        )
    }

    #[test]
    fn init_is_deterministic() {
        let config = small_config();
        let a = init_model(&config, 7).unwrap();
        let b = init_model(&config, 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = init_model(&config, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn param_count_matches_formula() {
        for learned_positions in [false, true] {
            let config = ModelConfig {
                learned_positions,
                ..small_config()
            };
            let model = init_model(&config, 1).unwrap();
            assert_eq!(model.param_count(), param_count_formula(&config));
            let layout_total: usize = model.layout().iter().map(|s| s.len()).sum();
            assert_eq!(model.param_count(), layout_total);
        }
        let default_config = ModelConfig::default();
        let model = init_model(&default_config, 1).unwrap();
        assert_eq!(model.param_count(), param_count_formula(&default_config));
    }

    #[test]
    fn config_validation_rejects_indivisible() {
        let bad_patch = ModelConfig {
            patch_size: 3,
            ..small_config()
        };
        assert!(bad_patch.validate().is_err());
        let bad_heads = ModelConfig {
            heads: 3,
            ..small_config()
        };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn blocks_start_as_identity() {
        let config = small_config();
        let model = init_model(&config, 3).unwrap();
        let (x, person, garment) = inputs(&config, 5);
        let mut tape = Tape::new();
        let binding = model.bind_frozen(&mut tape);
        let xi = tape.constant(grid_to_row(&x));
        let pi = tape.constant(grid_to_row(&person));
        let gi = tape.constant(grid_to_row(&garment));
        let nodes = model
            .forward_on_tape(&mut tape, &binding, xi, pi, gi, t(0.3))
            .unwrap();
        let input_tokens = tape.value(nodes.input_main).clone();
        for (block, hidden) in nodes.hidden_main.iter().enumerate() {
            assert_eq!(
                tape.value(*hidden).data,
                input_tokens.data,
                "block {block} deviates from identity at zero-initialized modulation"
            );
        }
    }

    #[test]
    fn forward_shapes_and_purity() {
        let config = small_config();
        let model = init_model(&config, 11).unwrap();
        let (x, person, garment) = inputs(&config, 1);
        let out1 = model.forward(&x, &person, &garment, t(0.25)).unwrap();
        assert_eq!(out1.velocity.shape(), x.shape());
        assert_eq!(out1.garment_out.shape(), garment.shape());
        let out2 = model.forward(&x, &person, &garment, t(0.25)).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let config = small_config();
        let model = init_model(&config, 11).unwrap();
        let (x, person, garment) = inputs(&config, 1);
        let wrong = LatentGrid::zeros(GridShape::new(3, 4, 4));
        assert!(model.forward(&wrong, &person, &garment, t(0.5)).is_err());
        assert!(model.forward(&x, &person, &garment, t(1.0)).is_err());
        assert!(matches!(
            model.forward(&x, &person, &garment, t(1.0)),
            Err(CoreError::TimeOutOfDomain { .. })
        ));
        let _ = garment;
    }

    #[test]
    fn outputs_depend_on_time() {
        let config = small_config();
        let mut model = init_model(&config, 13).unwrap();
        // Perturb modulation weights so blocks are not identity.
        perturb(&mut model, 17);
        let (x, person, garment) = inputs(&config, 2);
        let a = model.forward(&x, &person, &garment, t(0.1)).unwrap();
        let b = model.forward(&x, &person, &garment, t(0.8)).unwrap();
        assert!(a.velocity.distance(&b.velocity) > 0.0);
    }

    fn perturb(model: &mut VelocityModel, seed: u64) {
        let mut rng = stream_rng(seed, "perturb", 0);
        for v in model.params_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += 0.02 * z;
        }
    }

    fn cyclic_shift(grid: &LatentGrid, dr: usize, dc: usize) -> LatentGrid {
        let shape = grid.shape();
        let mut out = LatentGrid::zeros(shape);
        for c in 0..shape.channels {
            for row in 0..shape.height {
                for col in 0..shape.width {
                    let v = grid.get(c, row, col);
                    out.set(c, (row + dr) % shape.height, (col + dc) % shape.width, v);
                }
            }
        }
        out
    }

    #[test]
    fn translation_equivariant_without_positions() {
        let config = small_config();
        let mut model = init_model(&config, 19).unwrap();
        perturb(&mut model, 23);
        let (x, person, garment) = inputs(&config, 3);
        let p = config.patch_size;
        let base = model.forward(&x, &person, &garment, t(0.4)).unwrap();
        let shifted = model
            .forward(
                &cyclic_shift(&x, p, p),
                &cyclic_shift(&person, p, p),
                &cyclic_shift(&garment, p, p),
                t(0.4),
            )
            .unwrap();
        let expected_velocity = cyclic_shift(&base.velocity, p, p);
        let rel = shifted.velocity.distance(&expected_velocity) / expected_velocity.norm();
        assert!(rel < 1e-10, "velocity equivariance violated: rel={rel}");
        let expected_garment = cyclic_shift(&base.garment_out, p, p);
        let rel_g = shifted.garment_out.distance(&expected_garment) / expected_garment.norm();
        assert!(rel_g < 1e-10, "garment equivariance violated: rel={rel_g}");
    }

    #[test]
    fn translation_equivariance_breaks_with_positions() {
        let config = ModelConfig {
            learned_positions: true,
            ..small_config()
        };
        let mut model = init_model(&config, 19).unwrap();
        perturb(&mut model, 23);
        let (x, person, garment) = inputs(&config, 3);
        let p = config.patch_size;
        let base = model.forward(&x, &person, &garment, t(0.4)).unwrap();
        let shifted = model
            .forward(
                &cyclic_shift(&x, p, p),
                &cyclic_shift(&person, p, p),
                &cyclic_shift(&garment, p, p),
                t(0.4),
            )
            .unwrap();
        let expected = cyclic_shift(&base.velocity, p, p);
        let rel = shifted.velocity.distance(&expected) / expected.norm();
        assert!(rel > 1e-6, "positional tables should break equivariance");
    }

    #[test]
    fn attention_is_the_only_cross_stream_path() {
        let config = small_config();
        let mut model = init_model(&config, 29).unwrap();
        perturb(&mut model, 31);
        // Zero every attention output map and bias; the garment stream can
        // then no longer see the main stream.
        for block in 0..config.depth {
            for stream in ["main", "garment"] {
                for tensor in ["attn.wo", "attn.bo"] {
                    let spec = model
                        .spec(&format!("{stream}.block{block}.{tensor}"))
                        .unwrap()
                        .clone();
                    model.params_mut()[spec.offset..spec.offset + spec.len()].fill(0.0);
                }
            }
        }
        let (x, person, garment) = inputs(&config, 4);
        let (x2, person2, _) = inputs(&config, 44);
        let a = model.forward(&x, &person, &garment, t(0.3)).unwrap();
        let b = model.forward(&x2, &person2, &garment, t(0.3)).unwrap();
        assert_eq!(a.garment_out, b.garment_out);
        // Sanity: with attention intact the dependence is real.
        let intact = init_model(&config, 29).map(|mut m| {
            perturb(&mut m, 31);
            m
        })
        .unwrap();
        let ia = intact.forward(&x, &person, &garment, t(0.3)).unwrap();
        let ib = intact.forward(&x2, &person2, &garment, t(0.3)).unwrap();
        assert!(ia.garment_out.distance(&ib.garment_out) > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_spot_check() {
        let config = ModelConfig {
            depth: 1,
            ..small_config()
        };
        let mut model = init_model(&config, 37).unwrap();
        perturb(&mut model, 41);
        let (x, person, garment) = inputs(&config, 5);
        let target = seeded_normal_grid(5, "target", 0, config.grid_shape());

        let loss_of = |m: &VelocityModel| -> f64 {
            let mut tape = Tape::new();
            let binding = m.bind(&mut tape);
            let xi = tape.constant(grid_to_row(&x));
            let pi = tape.constant(grid_to_row(&person));
            let gi = tape.constant(grid_to_row(&garment));
            let nodes = m
                .forward_on_tape(&mut tape, &binding, xi, pi, gi, t(0.35))
                .unwrap();
            let tgt = tape.constant(grid_to_row(&target));
            let loss = tape.mse(nodes.velocity, tgt).unwrap();
            tape.value(loss).data[0]
        };

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let xi = tape.constant(grid_to_row(&x));
        let pi = tape.constant(grid_to_row(&person));
        let gi = tape.constant(grid_to_row(&garment));
        let nodes = model
            .forward_on_tape(&mut tape, &binding, xi, pi, gi, t(0.35))
            .unwrap();
        let tgt = tape.constant(grid_to_row(&target));
        let loss = tape.mse(nodes.velocity, tgt).unwrap();
        let mut grads = vec![0.0; model.param_count()];
        tape.backward(loss, &mut grads).unwrap();

        // A few representative coordinates across groups.
        for name in ["main.in.w", "main.block0.attn.wq", "main.block0.mod.w", "main.out.w", "time.w2"] {
            let spec = model.spec(name).unwrap().clone();
            for probe in [0usize, spec.len() / 2] {
                let idx = spec.offset + probe;
                let h = 1e-5;
                let orig = model.params()[idx];
                model.params_mut()[idx] = orig + h;
                let up = loss_of(&model);
                model.params_mut()[idx] = orig - h;
                let down = loss_of(&model);
                model.params_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[idx];
                let tol = 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8;
                assert!(
                    (numeric - analytic).abs() <= tol,
                    "{name}[{probe}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let mut model = init_model(&config, 43).unwrap();
        model.set_step(1234);
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = VelocityModel::load(&path).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded.step(), 1234);
        assert_eq!(loaded.seed(), 43);
        assert_eq!(loaded.config(), model.config());

        // Truncated body is rejected.
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            VelocityModel::load(&path),
            Err(CoreError::ArtifactMismatch(_))
        ));
    }

    #[test]
    fn model_field_velocity_matches_forward() {
        let config = small_config();
        let model = init_model(&config, 47).unwrap();
        let (x, person, garment) = inputs(&config, 6);
        let field = ModelField {
            model: &model,
            person: &person,
            garment: &garment,
        };
        use crate::flow::VelocityField as _;
        let via_field = field.velocity(&x, t(0.2)).unwrap();
        let via_forward = model.forward(&x, &person, &garment, t(0.2)).unwrap().velocity;
        assert_eq!(via_field, via_forward);
    }
}
