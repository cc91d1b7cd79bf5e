//! Transformer pose generators.
//!
//! Tokens are part features fused with the order and symmetry one-hots. The
//! parallel generator runs one bidirectional pass over all tokens; the
//! autoregressive generator prepends the tokens as a prompt and decodes one
//! pose feature per step, feeding `φ₁(z_{i−1}) ⊕ φ₂(token_i)` back in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Encodings, GeneratorKind, ModelConfig};
use crate::geom::{PartCloud, Pose};
use crate::knowledge::{
    order_encoding, rotary_graph, symmetry_encoding, KnowledgeError, RotaryConfig, SymmetryGrouping,
};
use crate::numerics::{Bound, Graph, Linear, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::partenc::PartEncoder;

const LN_EPS: f64 = 1e-5;
const QUAT_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("object has {got} parts; the model accepts 1..={max}")]
    PartCount { got: usize, max: usize },
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"),
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, d]));
        Norm { gamma, beta }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let rows = g.value(x).rows();
        let n = g.layernorm(x, LN_EPS);
        let gamma = g.repeat_rows(p.var(self.gamma), rows)?;
        let beta = g.repeat_rows(p.var(self.beta), rows)?;
        let s = g.mul(n, gamma)?;
        g.add(s, beta)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Attention layout of one transformer pass.
struct Attention<'a> {
    positions: &'a [usize],
    mask: Option<&'a [bool]>,
    rotary: Option<&'a RotaryConfig>,
}

#[derive(Clone, Copy, Debug)]
struct ArExtras {
    phi1: Linear,
    phi2: Linear,
    z0: ParamId,
}

/// Part encoder, knowledge fusion, transformer stack and pose head.
#[derive(Clone, Debug)]
pub struct AssemblyModel {
    cfg: ModelConfig,
    encoder: PartEncoder,
    fuse: Linear,
    blocks: Vec<Block>,
    final_ln: Norm,
    head1: Linear,
    head2: Linear,
    ar: Option<ArExtras>,
    rotary: RotaryConfig,
}

impl AssemblyModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        cfg.validate()
            .map_err(|e| NumericsError::Domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let encoder = PartEncoder::new(&mut store, &cfg.enc_widths, cfg.points, &mut rng);
        let fuse = Linear::new(
            &mut store,
            "fuse",
            cfg.d_enc() + cfg.n_max + cfg.m_max,
            d,
            &mut rng,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                let name = |s: &str| format!("layer{l}.{s}");
                Block {
                    ln1: Norm::new(&mut store, &name("ln1"), d),
                    q: Linear::new(&mut store, &name("q"), d, d, &mut rng),
                    k: Linear::new(&mut store, &name("k"), d, d, &mut rng),
                    v: Linear::new(&mut store, &name("v"), d, d, &mut rng),
                    o: Linear::new(&mut store, &name("o"), d, d, &mut rng),
                    ln2: Norm::new(&mut store, &name("ln2"), d),
                    ff1: Linear::new(&mut store, &name("ff1"), d, d * cfg.ff_mult, &mut rng),
                    ff2: Linear::new(&mut store, &name("ff2"), d * cfg.ff_mult, d, &mut rng),
                }
            })
            .collect();
        let final_ln = Norm::new(&mut store, "final_ln", d);
        let head1 = Linear::new(&mut store, "head.hidden", d, d, &mut rng);
        let head2 = Linear::new(&mut store, "head.out", d, 7, &mut rng);
        for v in store.get_mut(head2.w).data_mut() {
            *v *= 0.1;
        }
        store
            .get_mut(head2.b)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ar = (cfg.generator == GeneratorKind::Autoregressive).then(|| {
            let phi1 = Linear::new(&mut store, "ar.phi1", d, d / 2, &mut rng);
            let phi2 = Linear::new(&mut store, "ar.phi2", d, d - d / 2, &mut rng);
            let z0 = store.add_uniform("ar.z0", &[1, d / 2], d / 2, &mut rng);
            ArExtras { phi1, phi2, z0 }
        });
        let rotary = RotaryConfig::with_base(cfg.head_dim(), cfg.rotary_base)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                fuse,
                blocks,
                final_ln,
                head1,
                head2,
                ar,
                rotary,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &PartEncoder {
        &self.encoder
    }

    /// `Linear(v_i ⊕ e(i) ⊕ e(s_i))`, disabled encodings replaced by zeros.
    /// `grouping` is indexed by sequence position.
    pub fn fuse_knowledge(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        grouping: &SymmetryGrouping,
        enc: Encodings,
    ) -> Result<Var, ModelError> {
        let n = g.value(features).rows();
        if n > self.cfg.n_max {
            return Err(KnowledgeError::Capacity {
                what: "position",
                index: n - 1,
                capacity: self.cfg.n_max,
            }
            .into());
        }
        let mut order = Vec::with_capacity(n * self.cfg.n_max);
        let mut sym = Vec::with_capacity(n * self.cfg.m_max);
        for i in 0..n {
            if enc.oenc {
                order.extend(order_encoding(i, self.cfg.n_max)?);
            } else {
                order.extend(std::iter::repeat_n(0.0, self.cfg.n_max));
            }
            if enc.senc {
                sym.extend(symmetry_encoding(grouping.group_of(i), self.cfg.m_max)?);
            } else {
                sym.extend(std::iter::repeat_n(0.0, self.cfg.m_max));
            }
        }
        let order = g.constant(Tensor::matrix(n, self.cfg.n_max, order)?);
        let sym = g.constant(Tensor::matrix(n, self.cfg.m_max, sym)?);
        let x = g.concat(&[features, order, sym])?;
        Ok(self.fuse.forward(g, p, x)?)
    }

    fn block(
        &self,
        g: &mut Graph,
        p: &Bound,
        b: &Block,
        x: Var,
        att: &Attention,
    ) -> Result<Var, NumericsError> {
        let t = g.value(x).rows();
        let h = b.ln1.forward(g, p, x)?;
        let q = b.q.forward(g, p, h)?;
        let k = b.k.forward(g, p, h)?;
        let v = b.v.forward(g, p, h)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let mut qh = g.slice(q, hd * dh, dh)?;
            let mut kh = g.slice(k, hd * dh, dh)?;
            let vh = g.slice(v, hd * dh, dh)?;
            if let Some(rot) = att.rotary {
                qh = rotary_graph(g, qh, att.positions, rot)?;
                kh = rotary_graph(g, kh, att.positions, rot)?;
            }
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = match att.mask {
                Some(m) => g.masked_softmax(s, m)?,
                None => g.softmax(s),
            };
            heads.push(g.matmul(a, vh)?);
        }
        debug_assert_eq!(g.value(heads[0]).rows(), t);
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads)?
        };
        let o = b.o.forward(g, p, cat)?;
        let x = g.add(x, o)?;
        let h = b.ln2.forward(g, p, x)?;
        let f = b.ff1.forward(g, p, h)?;
        let f = g.relu(f);
        let f = b.ff2.forward(g, p, f)?;
        g.add(x, f)
    }

    fn transformer(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        att: &Attention,
    ) -> Result<Var, NumericsError> {
        let mut h = x;
        for b in &self.blocks {
            h = self.block(g, p, b, h, att)?;
        }
        self.final_ln.forward(g, p, h)
    }

    /// Shared pose head: `[T, d] → [T, 7]` with unit quaternion columns `0..4`.
    fn pose_head(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, NumericsError> {
        let h = self.head1.forward(g, p, z)?;
        let h = g.relu(h);
        let raw = self.head2.forward(g, p, h)?;
        let q = g.slice(raw, 0, 4)?;
        let q = g.l2_normalize(q, QUAT_EPS);
        let t = g.slice(raw, 4, 3)?;
        g.concat(&[q, t])
    }

    /// All poses in one bidirectional pass.
    pub fn parallel_generate(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        renc: bool,
    ) -> Result<Var, ModelError> {
        let n = g.value(tokens).rows();
        let positions: Vec<usize> = (0..n).collect();
        let att = Attention {
            positions: &positions,
            mask: None,
            rotary: renc.then_some(&self.rotary),
        };
        let z = self.transformer(g, p, tokens, &att)?;
        Ok(self.pose_head(g, p, z)?)
    }

    /// Sequential decode of the first `steps` poses (all of them when `None`).
    pub fn autoregressive_generate(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        renc: bool,
        steps: Option<usize>,
    ) -> Result<Var, ModelError> {
        let ar = self.ar.ok_or_else(|| {
            NumericsError::Domain("model was built without autoregressive parameters".into())
        })?;
        let n = g.value(tokens).rows();
        let steps = steps.unwrap_or(n).min(n);
        let positions: Vec<usize> = (0..2 * n).collect();
        let mut prev_z = p.var(ar.z0);
        let mut decode_inputs: Vec<Var> = Vec::with_capacity(steps);
        let mut poses = Vec::with_capacity(steps);
        for i in 0..steps {
            let left = if i == 0 {
                prev_z
            } else {
                ar.phi1.forward(g, p, prev_z)?
            };
            let tok = g.gather_rows(tokens, &[i])?;
            let right = ar.phi2.forward(g, p, tok)?;
            decode_inputs.push(g.concat(&[left, right])?);
            let mut seq = vec![tokens];
            seq.extend(&decode_inputs);
            let x = g.concat_rows(&seq)?;
            let t = n + i + 1;
            let mask = decode_mask(n, t);
            let att = Attention {
                positions: &positions[..t],
                mask: Some(&mask),
                rotary: renc.then_some(&self.rotary),
            };
            let out = self.transformer(g, p, x, &att)?;
            let z = g.gather_rows(out, &[t - 1])?;
            poses.push(self.pose_head(g, p, z)?);
            prev_z = z;
        }
        Ok(g.concat_rows(&poses)?)
    }

    /// Poses `[N, 7]` for parts given in assembly order; `grouping` is
    /// indexed by sequence position.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        clouds: &[&PartCloud],
        grouping: &SymmetryGrouping,
        enc: Encodings,
    ) -> Result<Var, ModelError> {
        let n = clouds.len();
        if n == 0 || n > self.cfg.n_max {
            return Err(ModelError::PartCount {
                got: n,
                max: self.cfg.n_max,
            });
        }
        let feats = self.encoder.forward(g, p, clouds)?;
        let tokens = self.fuse_knowledge(g, p, feats, grouping, enc)?;
        match self.cfg.generator {
            GeneratorKind::Parallel => self.parallel_generate(g, p, tokens, enc.renc),
            GeneratorKind::Autoregressive => {
                self.autoregressive_generate(g, p, tokens, enc.renc, None)
            }
        }
    }

    /// Inference with frozen parameters; poses returned in sequence order.
    pub fn predict(
        &self,
        store: &ParamStore,
        clouds: &[&PartCloud],
        grouping: &SymmetryGrouping,
        enc: Encodings,
    ) -> Result<Vec<Pose>, ModelError> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, clouds, grouping, enc)?;
        Ok(poses_from_output(g.value(out)))
    }
}

/// Prompt rows see only the prompt; decode row `r` sees the prompt and decode rows `≤ r`.
pub fn decode_mask(prompt: usize, total: usize) -> Vec<bool> {
    let mut m = vec![false; total * total];
    for r in 0..total {
        for c in 0..total {
            m[r * total + c] = c < prompt || (r >= prompt && c <= r);
        }
    }
    m
}

/// Converts `[N, 7]` head output into poses (canonical quaternion sign).
pub fn poses_from_output(t: &Tensor) -> Vec<Pose> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            Pose::from_raw([row[0], row[1], row[2], row[3]], [row[4], row[5], row[6]])
        })
        .collect()
}
