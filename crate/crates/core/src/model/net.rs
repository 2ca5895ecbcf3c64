use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sequence::{Modality, ModelConfig, TokenSequence};
use super::ModelError;
use crate::numerics::{Graph, Rotary, Scalar, Tensor, Var};
use crate::worldsim::{ACTION_DIM, STATE_DIM};

/// Named parameter arrays, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockIds {
    pub modulation: Linear,
    pub qkv: Linear,
    pub out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl BlockIds {
    fn linears(&self) -> [Linear; 5] {
        [self.modulation, self.qkv, self.out, self.ff1, self.ff2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossIds {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthIds {
    pub blocks: Vec<(BlockIds, CrossIds)>,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub video_in: Linear,
    pub state_in: [Linear; 2],
    pub action_in: [Linear; 2],
    pub view_emb: usize,
    pub task_emb: usize,
    pub modality_emb: usize,
    pub time: [Linear; 2],
    pub blocks: Vec<BlockIds>,
    pub final_mod: Linear,
    pub video_out: Linear,
    pub state_out: [Linear; 2],
    pub action_out: [Linear; 2],
    pub depth: Option<DepthIds>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.store.push(name, Tensor::new(shape, data).expect("shape"))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = if zero {
            self.zeros(format!("{name}.w"), &[fan_in, fan_out])
        } else {
            self.normal(format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
        };
        Linear { w, b: self.zeros(format!("{name}.b"), &[fan_out]) }
    }

    fn block(&mut self, name: &str, d: usize, ffn: usize) -> BlockIds {
        BlockIds {
            modulation: self.linear(&format!("{name}.mod"), d, 6 * d, true),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d, false),
            out: self.linear(&format!("{name}.out"), d, d, false),
            ff1: self.linear(&format!("{name}.ff1"), d, ffn * d, false),
            ff2: self.linear(&format!("{name}.ff2"), ffn * d, d, false),
        }
    }
}

/// Diffusion transformer over the unified sequence with an optional
/// interleaved depth branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct ForwardVars {
    /// `[B*H*V*P, token_width]` velocity for the noisy video tokens.
    pub video: Var,
    /// `[B*H, STATE_DIM]`.
    pub states: Var,
    /// `[B*K, ACTION_DIM]`.
    pub actions: Var,
    /// `[B*H*V*P, patch^2]` inverse-depth patches.
    pub depth: Option<Var>,
    /// Main-branch hidden state entering each of the final M blocks, then the last output.
    pub main_trace: Vec<Var>,
    /// Depth-branch hidden state at the same points.
    pub depth_trace: Vec<Var>,
}

/// Per-sample predictions in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub video: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub depth: Option<Vec<Vec<f64>>>,
}

fn sinusoid(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

fn split_rows(t: &Tensor<f32>, parts: usize) -> Vec<Vec<f64>> {
    let per = t.len() / parts.max(1);
    t.data().chunks(per.max(1)).take(parts).map(|c| c.iter().map(|&x| x as f64).collect()).collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.width;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::default() };
        let video_in = init.linear("video_in", config.token_width(), d, false);
        let state_in = [init.linear("state_in.0", STATE_DIM, d, false), init.linear("state_in.1", d, d, false)];
        let action_in = [init.linear("action_in.0", ACTION_DIM, d, false), init.linear("action_in.1", d, d, false)];
        let view_emb = init.normal("view_emb".into(), &[config.views, d], 0.1);
        let task_emb = init.normal("task_emb".into(), &[config.tasks, d], 0.1);
        let modality_emb = init.normal("modality_emb".into(), &[Modality::ALL.len(), d], 0.1);
        let time = [init.linear("time.0", d, d, false), init.linear("time.1", d, d, false)];
        let blocks = (0..config.depth).map(|i| init.block(&format!("trunk.{i}"), d, config.ffn_mult)).collect();
        let final_mod = init.linear("final.mod", d, 2 * d, true);
        let video_out = init.linear("video_out", d, config.token_width(), true);
        let state_out = [init.linear("state_out.0", d, d, false), init.linear("state_out.1", d, STATE_DIM, true)];
        let action_out = [init.linear("action_out.0", d, d, false), init.linear("action_out.1", d, ACTION_DIM, true)];
        let layout = Layout {
            video_in,
            state_in,
            action_in,
            view_emb,
            task_emb,
            modality_emb,
            time,
            blocks,
            final_mod,
            video_out,
            state_out,
            action_out,
            depth: None,
        };
        Ok(Self { config, params: init.store, layout })
    }

    pub fn depth_initialized(&self) -> bool {
        self.layout.depth.is_some()
    }

    /// Replicates the final `m` trunk blocks into the depth branch, adds a
    /// cross-attention sublayer per block with a zero output projection, and
    /// a zero-initialized inverse-depth head.
    pub fn init_depth_branch(&mut self, m: usize, seed: u64) -> Result<(), ModelError> {
        let n = self.config.depth;
        if m >= n {
            return Err(ModelError::Config(format!("depth-branch size M={m} must be below trunk depth N={n}")));
        }
        if self.layout.depth.is_some() {
            return Err(ModelError::Config("depth branch already initialized".into()));
        }
        let d = self.config.width;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: std::mem::take(&mut self.params) };
        let mut blocks = Vec::with_capacity(m);
        for j in 0..m {
            let src = self.layout.blocks[n - m + j];
            let copy = |init: &mut Init, suffix: &str, l: Linear| Linear {
                w: init.store.push(format!("depth.{j}.{suffix}.w"), init.store.tensors[l.w].clone()),
                b: init.store.push(format!("depth.{j}.{suffix}.b"), init.store.tensors[l.b].clone()),
            };
            let block = BlockIds {
                modulation: copy(&mut init, "mod", src.modulation),
                qkv: copy(&mut init, "qkv", src.qkv),
                out: copy(&mut init, "out", src.out),
                ff1: copy(&mut init, "ff1", src.ff1),
                ff2: copy(&mut init, "ff2", src.ff2),
            };
            let cross = CrossIds {
                q: init.linear(&format!("depth.{j}.cross.q"), d, d, false),
                kv: init.linear(&format!("depth.{j}.cross.kv"), d, 2 * d, false),
                out: init.linear(&format!("depth.{j}.cross.out"), d, d, true),
            };
            blocks.push((block, cross));
        }
        let head = init.linear("depth.head", d, self.config.depth_token_width(), true);
        self.params = init.store;
        self.config.depth_blocks = m;
        self.layout.depth = Some(DepthIds { blocks, head });
        Ok(())
    }

    /// Adds Gaussian noise to every parameter (test fixtures use this to move
    /// away from the zero-initialized identity network).
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        for t in &mut self.params.tensors {
            for x in t.data_mut() {
                *x += dist.sample(&mut rng) as f32;
            }
        }
    }

    /// Indices of the trunk block parameters copied into depth block `j`.
    pub fn replicated_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.config.depth;
        let Some(depth) = &self.layout.depth else { return Vec::new() };
        let m = depth.blocks.len();
        let mut pairs = Vec::new();
        for (j, (b, _)) in depth.blocks.iter().enumerate() {
            for (dl, tl) in b.linears().iter().zip(self.layout.blocks[n - m + j].linears()) {
                pairs.push((tl.w, dl.w));
                pairs.push((tl.b, dl.b));
            }
        }
        pairs
    }

    /// Ids of parameters that belong to the depth branch.
    pub fn depth_param_ids(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params.names[i].starts_with("depth.")).collect()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<Var> {
        self.params.tensors.iter().map(|t| g.leaf(t.cast::<S>(), requires_grad)).collect()
    }

    fn check_batch(&self, seqs: &[TokenSequence]) -> Result<(), ModelError> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let tw = cfg.token_width();
        for (i, s) in seqs.iter().enumerate() {
            if s.task >= cfg.tasks {
                return Err(ModelError::Task(s.task));
            }
            let ok = s.video_cond.len() == cfg.cond_video_tokens() * tw
                && s.video.len() == cfg.video_tokens() * tw
                && s.state_cond.len() == STATE_DIM
                && s.states.len() == cfg.horizon * STATE_DIM
                && s.actions.len() == cfg.chunk * ACTION_DIM;
            if !ok {
                return Err(ModelError::Shape(format!("sequence {i} does not match the model configuration")));
            }
        }
        Ok(())
    }

    /// Builds the forward pass on `g` over parameter leaves `p`.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[Var],
        seqs: &[TokenSequence],
        depth_enabled: bool,
    ) -> Result<ForwardVars, ModelError> {
        self.check_batch(seqs)?;
        if depth_enabled && self.layout.depth.is_none() {
            return Err(ModelError::DepthUninitialized);
        }
        if p.len() != self.params.len() {
            return Err(ModelError::Shape(format!("{} parameter leaves for {} parameters", p.len(), self.params.len())));
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let (b, d, l, tw) = (seqs.len(), cfg.width, cfg.seq_len(), cfg.token_width());
        let (nv0, nv, ns, k) = (cfg.cond_video_tokens(), cfg.video_tokens(), 1 + cfg.horizon, cfg.chunk);
        let nva = nv0 + nv;

        let mut video = Vec::with_capacity(b * nva * tw);
        let mut states = Vec::with_capacity(b * ns * STATE_DIM);
        let mut actions = Vec::with_capacity(b * k * ACTION_DIM);
        for s in seqs {
            video.extend_from_slice(&s.video_cond);
            video.extend_from_slice(&s.video);
            states.extend_from_slice(&s.state_cond);
            states.extend_from_slice(&s.states);
            actions.extend_from_slice(&s.actions);
        }
        let xv = g.constant(Tensor::from_f64(&[b * nva, tw], &video)?);
        let xs = g.constant(Tensor::from_f64(&[b * ns, STATE_DIM], &states)?);
        let xa = g.constant(Tensor::from_f64(&[b * k, ACTION_DIM], &actions)?);
        let ev = linear(g, p, xv, lay.video_in)?;
        let es = mlp(g, p, xs, lay.state_in)?;
        let ea = mlp(g, p, xa, lay.action_in)?;
        let cat = g.concat_rows(&[ev, es, ea])?;

        let meta = cfg.metadata(0.0, 0.0);
        let mut order = Vec::with_capacity(b * l);
        for bi in 0..b {
            for i in 0..l {
                order.push(if i < nva {
                    bi * nva + i
                } else if i < nva + ns {
                    b * nva + bi * ns + (i - nva)
                } else {
                    b * (nva + ns) + bi * k + (i - nva - ns)
                });
            }
        }
        let mut x = g.gather_rows(cat, Arc::new(order))?;

        let zero = g.constant(Tensor::zeros(&[1, d]));
        let table = g.concat_rows(&[p[lay.view_emb], p[lay.task_emb], p[lay.modality_emb], zero])?;
        let (view0, task0, mod0, zero_row) = (0, cfg.views, cfg.views + cfg.tasks, cfg.views + cfg.tasks + Modality::ALL.len());
        let mut view_idx = Vec::with_capacity(b * l);
        let mut task_idx = Vec::with_capacity(b * l);
        let mut mod_idx = Vec::with_capacity(b * l);
        let mut time_idx = Vec::with_capacity(b * l);
        for (bi, s) in seqs.iter().enumerate() {
            for m in &meta {
                view_idx.push(m.view.map_or(zero_row, |v| view0 + v));
                task_idx.push(if m.modality.is_conditioning() { task0 + s.task } else { zero_row });
                mod_idx.push(mod0 + m.modality.index());
                time_idx.push(
                    3 * bi
                        + match m.modality {
                            Modality::VideoCond | Modality::StateCond => 0,
                            Modality::Video => 1,
                            Modality::State | Modality::Action => 2,
                        },
                );
            }
        }
        for idx in [view_idx, task_idx, mod_idx] {
            let e = g.gather_rows(table, Arc::new(idx))?;
            x = g.add(x, e)?;
        }

        let mut temb = Vec::with_capacity(3 * b * d);
        for s in seqs {
            for t in [0.0, s.t_o, s.t_a] {
                temb.extend(sinusoid(t, d));
            }
        }
        let temb = g.constant(Tensor::from_f64(&[3 * b, d], &temb)?);
        let c = mlp(g, p, temb, lay.time)?;
        let sc = g.silu(c)?;
        let ctx = Ctx { p, sc, time_idx: Arc::new(time_idx), rot: cfg.rotary::<S>(), heads: cfg.heads, batch: b, d };

        let n = cfg.depth;
        let m = if depth_enabled { lay.depth.as_ref().map_or(cfg.depth_blocks, |dp| dp.blocks.len()) } else { cfg.depth_blocks };
        for ids in &lay.blocks[..n - m] {
            x = ctx.block(g, x, ids, None)?;
        }
        let (mut zm, mut zd) = (x, x);
        let mut main_trace = vec![x];
        let mut depth_trace = vec![x];
        for j in 0..m {
            let next = ctx.block(g, zm, &lay.blocks[n - m + j], None)?;
            if depth_enabled {
                let (ids, cross) = &lay.depth.as_ref().expect("checked above").blocks[j];
                zd = ctx.block(g, zd, ids, Some((zm, cross)))?;
                depth_trace.push(zd);
            }
            zm = next;
            main_trace.push(zm);
        }

        let fm = linear(g, p, ctx.sc, lay.final_mod)?;
        let fm = g.gather_rows(fm, Arc::clone(&ctx.time_idx))?;
        let shift = g.slice_cols(fm, 0, d)?;
        let scale = g.slice_cols(fm, d, d)?;
        let y = g.layer_norm(zm)?;
        let y = modulate(g, y, shift, scale)?;
        let rows = |start: usize, count: usize| -> Arc<Vec<usize>> {
            Arc::new((0..b).flat_map(|bi| (0..count).map(move |i| bi * l + start + i)).collect())
        };
        let video_rows = rows(nv0, nv);
        let yv = g.gather_rows(y, Arc::clone(&video_rows))?;
        let video = linear(g, p, yv, lay.video_out)?;
        let ys = g.gather_rows(y, rows(nva + 1, cfg.horizon))?;
        let states = mlp(g, p, ys, lay.state_out)?;
        let ya = g.gather_rows(y, rows(nva + ns, k))?;
        let actions = mlp(g, p, ya, lay.action_out)?;
        let depth = if depth_enabled {
            let head = lay.depth.as_ref().expect("checked above").head;
            let yd = g.gather_rows(zd, video_rows)?;
            let yd = g.layer_norm(yd)?;
            Some(linear(g, p, yd, head)?)
        } else {
            None
        };
        Ok(ForwardVars { video, states, actions, depth, main_trace, depth_trace })
    }

    /// Inference-only forward in single precision.
    pub fn forward(&self, seqs: &[TokenSequence], depth_enabled: bool) -> Result<ForwardOutput, ModelError> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, seqs, depth_enabled)?;
        let b = seqs.len();
        Ok(ForwardOutput {
            video: split_rows(g.value(out.video), b),
            states: split_rows(g.value(out.states), b),
            actions: split_rows(g.value(out.actions), b),
            depth: out.depth.map(|v| split_rows(g.value(v), b)),
        })
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, p: &[Var], x: Var, l: Linear) -> Result<Var, ModelError> {
    Ok(g.linear(x, p[l.w], p[l.b])?)
}

fn mlp<S: Scalar>(g: &mut Graph<S>, p: &[Var], x: Var, l: [Linear; 2]) -> Result<Var, ModelError> {
    let h = linear(g, p, x, l[0])?;
    let h = g.silu(h)?;
    linear(g, p, h, l[1])
}

/// `x * (1 + scale) + shift`.
fn modulate<S: Scalar>(g: &mut Graph<S>, x: Var, shift: Var, scale: Var) -> Result<Var, ModelError> {
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    Ok(g.add(y, shift)?)
}

struct Ctx<'a, S> {
    p: &'a [Var],
    sc: Var,
    time_idx: Arc<Vec<usize>>,
    rot: Arc<Rotary<S>>,
    heads: usize,
    batch: usize,
    d: usize,
}

impl<S: Scalar> Ctx<'_, S> {
    fn attend(&self, g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Var, ModelError> {
        let q = g.rope(q, self.heads, &self.rot)?;
        let k = g.rope(k, self.heads, &self.rot)?;
        Ok(g.attention(q, k, v, self.heads, self.batch, None)?)
    }

    /// adaLN-Zero transformer block; `cross` adds attention from the depth
    /// stream into the given main-branch hidden state before the FFN.
    fn block(&self, g: &mut Graph<S>, x: Var, ids: &BlockIds, cross: Option<(Var, &CrossIds)>) -> Result<Var, ModelError> {
        let (p, d) = (self.p, self.d);
        let m = linear(g, p, self.sc, ids.modulation)?;
        let m = g.gather_rows(m, Arc::clone(&self.time_idx))?;
        let mut chunk = [x; 6];
        for (i, c) in chunk.iter_mut().enumerate() {
            *c = g.slice_cols(m, i * d, d)?;
        }
        let [shift1, scale1, gate1, shift2, scale2, gate2] = chunk;

        let h = g.layer_norm(x)?;
        let h = modulate(g, h, shift1, scale1)?;
        let qkv = linear(g, p, h, ids.qkv)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let a = self.attend(g, q, k, v)?;
        let a = linear(g, p, a, ids.out)?;
        let a = g.mul(gate1, a)?;
        let mut x = g.add(x, a)?;

        if let Some((main, c)) = cross {
            let hq = g.layer_norm(x)?;
            let q = linear(g, p, hq, c.q)?;
            let hm = g.layer_norm(main)?;
            let kv = linear(g, p, hm, c.kv)?;
            let k = g.slice_cols(kv, 0, d)?;
            let v = g.slice_cols(kv, d, d)?;
            let a = self.attend(g, q, k, v)?;
            let a = linear(g, p, a, c.out)?;
            x = g.add(x, a)?;
        }

        let h = g.layer_norm(x)?;
        let h = modulate(g, h, shift2, scale2)?;
        let f = linear(g, p, h, ids.ff1)?;
        let f = g.gelu(f)?;
        let f = linear(g, p, f, ids.ff2)?;
        let f = g.mul(gate2, f)?;
        Ok(g.add(x, f)?)
    }
}
