//! Decomposed transformer language module.
//!
//! The stack is split into a lower stage and an upper stage. The lower stage
//! produces contextual embeddings used to build the entity memory and to host
//! entity fusion; the upper stage consumes the fused sequence. Composing the
//! two stages with fusion disabled is exactly the undivided stack: both stages
//! share one parameterization and one block recipe, so the split point is a
//! pure bookkeeping boundary.
//!
//! Blocks are post-norm: residual add then LayerNorm, GELU feed-forward of
//! width 4F, learned absolute positions, additive key masking for padding.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text;

/// LayerNorm variance floor shared by every normalization site in the model.
pub const LN_EPS: f64 = 1e-5;

/// Additive score for masked (padding) key positions.
const NEG_INF: f64 = -1e30;

/// A padded batch of token sequences laid out row-major as (batch*len, F)
/// activations downstream. Padding uses the PAD token id; true lengths are
/// kept so attention can mask pad keys.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub flat: Vec<usize>,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    /// Pads to the longest sequence in the batch. Sequences longer than
    /// `max_len` are an error; callers that tolerate overlength input must
    /// truncate before batching.
    pub fn new(seqs: &[Vec<usize>], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Shape("token batch must be non-empty".into()));
        }
        let mut len = 0;
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Shape(format!("sequence {i} is empty")));
            }
            if s.len() > max_len {
                return Err(Error::Shape(format!(
                    "sequence {i} has {} tokens, position table holds {max_len}",
                    s.len()
                )));
            }
            len = len.max(s.len());
        }
        let mut flat = Vec::with_capacity(seqs.len() * len);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            flat.extend_from_slice(s);
            flat.resize(flat.len() + (len - s.len()), text::PAD_ID);
            lens.push(s.len());
        }
        Ok(TokenBatch { batch: seqs.len(), len, flat, lens })
    }

    /// Row index of position `i` of sequence `b` in the flattened layout.
    pub fn flat_pos(&self, b: usize, i: usize) -> usize {
        debug_assert!(b < self.batch && i < self.len);
        b * self.len + i
    }
}

/// Attention probabilities recorded during a forward pass, one entry per
/// (layer, head) in layer-major order. Each Var is (batch*len, len).
pub type AttentionTrace = Vec<Var>;

#[derive(Clone, Debug)]
pub struct LanguageModule {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub split: usize,
    pub max_len: usize,
    pub vocab_len: usize,
}

impl LanguageModule {
    pub fn new(cfg: &TrainConfig, vocab_len: usize) -> Result<Self> {
        if cfg.lm_split == 0 || cfg.lm_split >= cfg.lm_layers {
            return Err(Error::Config(format!(
                "stage split {} must lie strictly inside the {} layers",
                cfg.lm_split, cfg.lm_layers
            )));
        }
        if cfg.embed_dim % cfg.lm_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide width {}",
                cfg.lm_heads, cfg.embed_dim
            )));
        }
        if vocab_len <= text::NUM_SPECIALS {
            return Err(Error::Config("vocabulary holds no content tokens".into()));
        }
        Ok(LanguageModule {
            dim: cfg.embed_dim,
            heads: cfg.lm_heads,
            layers: cfg.lm_layers,
            split: cfg.lm_split,
            max_len: cfg.max_seq_len,
            vocab_len,
        })
    }

    /// Registers all stack parameters. Weight matrices are N(0, 0.02),
    /// biases zero, LayerNorm gain one.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        fn mat(
            store: &mut ParamStore,
            name: &str,
            r: usize,
            c: usize,
            rng: &mut impl Rng,
        ) -> Result<()> {
            store
                .insert(name, ParamGroup::Language, Tensor::randn(&[r, c], 0.02, rng))
                .map(|_| ())
        }
        let f = self.dim;
        let g = ParamGroup::Language;
        mat(store, "lm.tok_embed", self.vocab_len, f, rng)?;
        mat(store, "lm.pos_embed", self.max_len, f, rng)?;
        for l in 0..self.layers {
            let p = layer_prefix(l);
            for w in ["wq", "wk", "wv", "wo"] {
                mat(store, &format!("{p}.attn.{w}"), f, f, rng)?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(&format!("{p}.attn.{b}"), g, Tensor::zeros(&[1, f]))?;
            }
            mat(store, &format!("{p}.ffn.w1"), f, 4 * f, rng)?;
            store.insert(&format!("{p}.ffn.b1"), g, Tensor::zeros(&[1, 4 * f]))?;
            mat(store, &format!("{p}.ffn.w2"), 4 * f, f, rng)?;
            store.insert(&format!("{p}.ffn.b2"), g, Tensor::zeros(&[1, f]))?;
            for ln in ["ln1", "ln2"] {
                store.insert(&format!("{p}.{ln}.g"), g, Tensor::filled(&[1, f], 1.0))?;
                store.insert(&format!("{p}.{ln}.b"), g, Tensor::zeros(&[1, f]))?;
            }
        }
        store.insert("lm.fuse_ln.g", g, Tensor::filled(&[1, f], 1.0))?;
        store.insert("lm.fuse_ln.b", g, Tensor::zeros(&[1, f]))?;
        Ok(())
    }

    /// Token + position embeddings for a batch, (batch*len, F).
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, tb: &TokenBatch) -> Result<Var> {
        for (i, &t) in tb.flat.iter().enumerate() {
            if t >= self.vocab_len {
                return Err(Error::Shape(format!(
                    "token id {t} at flat position {i} outside vocabulary of {}",
                    self.vocab_len
                )));
            }
        }
        if tb.len > self.max_len {
            return Err(Error::Shape(format!(
                "batch length {} exceeds position table {}",
                tb.len, self.max_len
            )));
        }
        let tok = store.var(tape, "lm.tok_embed")?;
        let pos = store.var(tape, "lm.pos_embed")?;
        let te = tape.gather_rows(tok, &tb.flat)?;
        let pos_idx: Vec<usize> = (0..tb.batch).flat_map(|_| 0..tb.len).collect();
        let pe = tape.gather_rows(pos, &pos_idx)?;
        tape.add(te, pe)
    }

    /// Lower stage: layers [0, split).
    pub fn first_stage(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        tb: &TokenBatch,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        self.forward_layers(tape, store, x, 0, self.split, tb, trace)
    }

    /// Upper stage: layers [split, layers).
    pub fn second_stage(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        tb: &TokenBatch,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        self.forward_layers(tape, store, x, self.split, self.layers, tb, trace)
    }

    /// Runs layers [lo, hi) over flattened activations.
    pub fn forward_layers(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        lo: usize,
        hi: usize,
        tb: &TokenBatch,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if hi > self.layers || lo > hi {
            return Err(Error::Config(format!("layer range {lo}..{hi} outside stack")));
        }
        let mask = tape.constant(key_mask(tb));
        for l in lo..hi {
            x = self.block(tape, store, x, l, tb, mask, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layer: usize,
        tb: &TokenBatch,
        mask: Var,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let p = layer_prefix(layer);
        let dh = self.dim / self.heads;
        let wq = store.var(tape, &format!("{p}.attn.wq"))?;
        let wk = store.var(tape, &format!("{p}.attn.wk"))?;
        let wv = store.var(tape, &format!("{p}.attn.wv"))?;
        let wo = store.var(tape, &format!("{p}.attn.wo"))?;
        let bq = store.var(tape, &format!("{p}.attn.bq"))?;
        let bk = store.var(tape, &format!("{p}.attn.bk"))?;
        let bv = store.var(tape, &format!("{p}.attn.bv"))?;
        let bo = store.var(tape, &format!("{p}.attn.bo"))?;

        let q = tape.matmul(x, wq, false, false)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(x, wk, false, false)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(x, wv, false, false)?;
        let v = tape.add_bias(v, bv)?;

        let mut ctx = Vec::with_capacity(self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs_out = Vec::new();
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = tape.batch_matmul(qh, kh, tb.batch, false, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax_rows(scores);
            probs_out.push(probs);
            ctx.push(tape.batch_matmul(probs, vh, tb.batch, false, false)?);
        }
        if let Some(tr) = trace {
            tr.extend(probs_out);
        }
        let ctx = tape.concat_cols(&ctx)?;
        let attn = tape.matmul(ctx, wo, false, false)?;
        let attn = tape.add_bias(attn, bo)?;
        let x = tape.add(x, attn)?;
        let g1 = store.var(tape, &format!("{p}.ln1.g"))?;
        let b1 = store.var(tape, &format!("{p}.ln1.b"))?;
        let x = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let w1 = store.var(tape, &format!("{p}.ffn.w1"))?;
        let b1f = store.var(tape, &format!("{p}.ffn.b1"))?;
        let w2 = store.var(tape, &format!("{p}.ffn.w2"))?;
        let b2f = store.var(tape, &format!("{p}.ffn.b2"))?;
        let h = tape.matmul(x, w1, false, false)?;
        let h = tape.add_bias(h, b1f)?;
        let h = tape.gelu(h);
        let f = tape.matmul(h, w2, false, false)?;
        let f = tape.add_bias(f, b2f)?;
        let x = tape.add(x, f)?;
        let g2 = store.var(tape, &format!("{p}.ln2.g"))?;
        let b2 = store.var(tape, &format!("{p}.ln2.b"))?;
        tape.layer_norm(x, g2, b2, LN_EPS)
    }

    /// Adds entity rows into the lower-stage output at the given flat
    /// positions (one row per covered position), then normalizes. With no
    /// positions only the normalization applies.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        rows: Option<Var>,
        positions: &[usize],
    ) -> Result<Var> {
        let fused = match rows {
            Some(r) => tape.scatter_add_rows(z, r, positions)?,
            None => {
                if !positions.is_empty() {
                    return Err(Error::Shape("fusion positions given without rows".into()));
                }
                z
            }
        };
        let g = store.var(tape, "lm.fuse_ln.g")?;
        let b = store.var(tape, "lm.fuse_ln.b")?;
        tape.layer_norm(fused, g, b, LN_EPS)
    }

    /// Context embedding of one description: mean of the lower-stage outputs
    /// at the mention boundary positions, a (1, F) row.
    pub fn encode_description(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        span: (usize, usize),
    ) -> Result<Var> {
        if span.0 > span.1 || span.1 >= tokens.len() {
            return Err(Error::Shape(format!(
                "span {span:?} outside sequence of {}",
                tokens.len()
            )));
        }
        let tb = TokenBatch::new(&[tokens.to_vec()], self.max_len)?;
        let x = self.embed(tape, store, &tb)?;
        let z = self.first_stage(tape, store, x, &tb, None)?;
        let ends = tape.gather_rows(z, &[span.0, span.1])?;
        let half = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        tape.matmul(half, ends, false, false)
    }
}

fn layer_prefix(l: usize) -> String {
    format!("lm.l{l:02}")
}

/// Additive attention mask, (batch*len, len): zero on real key positions,
/// NEG_INF on pad keys of the owning sequence.
fn key_mask(tb: &TokenBatch) -> Tensor {
    let mut m = Tensor::zeros(&[tb.batch * tb.len, tb.len]);
    for b in 0..tb.batch {
        for i in 0..tb.len {
            let row = b * tb.len + i;
            for j in tb.lens[b]..tb.len {
                m.data_mut()[row * tb.len + j] = NEG_INF;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::matmul;

    fn tiny() -> (LanguageModule, ParamStore) {
        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 8;
        cfg.lm_heads = 2;
        cfg.lm_layers = 2;
        cfg.lm_split = 1;
        cfg.max_seq_len = 10;
        let lm = LanguageModule::new(&cfg, 13).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::chacha(rng::mix(7, rng::StreamTag::ParamInit, 0));
        lm.init_params(&mut store, &mut r).unwrap();
        (lm, store)
    }

    fn p(store: &ParamStore, name: &str) -> Tensor {
        store.get(name).unwrap().value.clone()
    }

    // Reference forward for one unpadded sequence, written directly against
    // the tensor kernels with no tape and no batching. Serves as the oracle
    // for wiring, padding independence, and the stage decomposition.
    fn reference_forward(
        lm: &LanguageModule,
        store: &ParamStore,
        tokens: &[usize],
        lo: usize,
        hi: usize,
    ) -> Tensor {
        let n = tokens.len();
        let f = lm.dim;
        let mut x = {
            let tok = p(store, "lm.tok_embed");
            let pos = p(store, "lm.pos_embed");
            let mut x = Tensor::zeros(&[n, f]);
            for (i, &t) in tokens.iter().enumerate() {
                for c in 0..f {
                    x.data_mut()[i * f + c] = tok.data()[t * f + c] + pos.data()[i * f + c];
                }
            }
            x
        };
        let dh = f / lm.heads;
        for l in lo..hi {
            let pf = layer_prefix(l);
            let lin = |x: &Tensor, w: &str, b: &str| {
                let mut y = matmul(x, &p(store, &format!("{pf}.{w}")), false, false).unwrap();
                let bias = p(store, &format!("{pf}.{b}"));
                let (rr, cc) = (y.rows(), y.cols());
                for r in 0..rr {
                    for c in 0..cc {
                        y.data_mut()[r * cc + c] += bias.data()[c];
                    }
                }
                y
            };
            let q = lin(&x, "attn.wq", "attn.bq");
            let k = lin(&x, "attn.wk", "attn.bk");
            let v = lin(&x, "attn.wv", "attn.bv");
            let mut ctx = Tensor::zeros(&[n, f]);
            for h in 0..lm.heads {
                for i in 0..n {
                    let qi = &q.data()[i * f + h * dh..i * f + (h + 1) * dh];
                    let mut scores = vec![0.0; n];
                    for j in 0..n {
                        let kj = &k.data()[j * f + h * dh..j * f + (h + 1) * dh];
                        scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..n {
                        let w = exps[j] / z;
                        for c in 0..dh {
                            ctx.data_mut()[i * f + h * dh + c] += w * v.data()[j * f + h * dh + c];
                        }
                    }
                }
            }
            let attn = lin(&ctx, "attn.wo", "attn.bo");
            for i in 0..n * f {
                x.data_mut()[i] += attn.data()[i];
            }
            x = ref_layer_norm(&x, &p(store, &format!("{pf}.ln1.g")), &p(store, &format!("{pf}.ln1.b")));
            let mut hmid = lin(&x, "ffn.w1", "ffn.b1");
            for v in hmid.data_mut() {
                let c = (2.0_f64 / std::f64::consts::PI).sqrt();
                *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * v.powi(3))).tanh());
            }
            let up = {
                let mut y = matmul(&hmid, &p(store, &format!("{pf}.ffn.w2")), false, false).unwrap();
                let b = p(store, &format!("{pf}.ffn.b2"));
                for r in 0..n {
                    for c in 0..f {
                        y.data_mut()[r * f + c] += b.data()[c];
                    }
                }
                y
            };
            for i in 0..n * f {
                x.data_mut()[i] += up.data()[i];
            }
            x = ref_layer_norm(&x, &p(store, &format!("{pf}.ln2.g")), &p(store, &format!("{pf}.ln2.b")));
        }
        x
    }

    fn ref_layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let (n, f) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[n, f]);
        for r in 0..n {
            let row = &x.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..f {
                out.data_mut()[r * f + c] = (row[c] - mean) * inv * g.data()[c] + b.data()[c];
            }
        }
        out
    }

    #[test]
    fn batched_forward_matches_per_sequence_reference() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1, 5, 6, 7, 2], vec![1, 8, 9, 10, 11, 12, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let mut tape = Tape::new();
        let x = lm.embed(&mut tape, &store, &tb).unwrap();
        let z1 = lm.first_stage(&mut tape, &store, x, &tb, None).unwrap();
        let z = lm.second_stage(&mut tape, &store, z1, &tb, None).unwrap();
        let zv = tape.value(z);
        for (b, s) in seqs.iter().enumerate() {
            let want = reference_forward(&lm, &store, s, 0, lm.layers);
            for i in 0..s.len() {
                for c in 0..lm.dim {
                    let got = zv.data()[(tb.flat_pos(b, i)) * lm.dim + c];
                    let expect = want.data()[i * lm.dim + c];
                    assert!(
                        (got - expect).abs() <= 1e-12,
                        "seq {b} pos {i} col {c}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn stage_composition_matches_monolithic_run() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1, 5, 6, 2], vec![1, 7, 8, 9, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();

        let mut t1 = Tape::new();
        let x = lm.embed(&mut t1, &store, &tb).unwrap();
        let whole = lm.forward_layers(&mut t1, &store, x, 0, lm.layers, &tb, None).unwrap();
        let whole = t1.value(whole).clone();

        let mut t2 = Tape::new();
        let x = lm.embed(&mut t2, &store, &tb).unwrap();
        let lower = lm.first_stage(&mut t2, &store, x, &tb, None).unwrap();
        let upper = lm.second_stage(&mut t2, &store, lower, &tb, None).unwrap();
        let upper = t2.value(upper).clone();

        assert!(whole.max_abs_diff(&upper).unwrap() <= 1e-12);
    }

    #[test]
    fn encode_description_is_boundary_mean_of_lower_stage() {
        let (lm, store) = tiny();
        let tokens = vec![1usize, 5, 6, 7, 8, 2];
        let mut tape = Tape::new();
        let q = lm.encode_description(&mut tape, &store, &tokens, (2, 4)).unwrap();
        let got = tape.value(q);
        let z1 = reference_forward(&lm, &store, &tokens, 0, lm.split);
        for c in 0..lm.dim {
            let want = 0.5 * (z1.data()[2 * lm.dim + c] + z1.data()[4 * lm.dim + c]);
            assert!((got.data()[c] - want).abs() <= 1e-12);
        }
        // degenerate span: single position mean is that position
        let mut tape = Tape::new();
        let q = lm.encode_description(&mut tape, &store, &tokens, (1, 1)).unwrap();
        let got = tape.value(q);
        for c in 0..lm.dim {
            assert!((got.data()[c] - z1.data()[lm.dim + c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusion_adds_rows_then_normalizes() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1usize, 5, 6, 7, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let mut tape = Tape::new();
        let x = lm.embed(&mut tape, &store, &tb).unwrap();
        let z = lm.first_stage(&mut tape, &store, x, &tb, None).unwrap();
        let zval = tape.value(z).clone();
        let row = Tensor::randn(&[1, lm.dim], 1.0, &mut rng::chacha(3));
        let row_const = tape.constant(row.clone());
        let rows = tape.gather_rows(row_const, &[0, 0]).unwrap();
        let fused = lm.fuse(&mut tape, &store, z, Some(rows), &[2, 3]).unwrap();
        let got = tape.value(fused);

        let mut manual = zval.clone();
        for pos in [2usize, 3] {
            for c in 0..lm.dim {
                manual.data_mut()[pos * lm.dim + c] += row.data()[c];
            }
        }
        let want = ref_layer_norm(&manual, &p(&store, "lm.fuse_ln.g"), &p(&store, "lm.fuse_ln.b"));
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn fusion_without_mentions_is_pure_normalization() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1usize, 5, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let mut tape = Tape::new();
        let x = lm.embed(&mut tape, &store, &tb).unwrap();
        let z = lm.first_stage(&mut tape, &store, x, &tb, None).unwrap();
        let zval = tape.value(z).clone();
        let fused = lm.fuse(&mut tape, &store, z, None, &[]).unwrap();
        let want = ref_layer_norm(&zval, &p(&store, "lm.fuse_ln.g"), &p(&store, "lm.fuse_ln.b"));
        assert!(tape.value(fused).max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn overlength_sequence_is_rejected() {
        let (lm, _) = tiny();
        let long: Vec<usize> = std::iter::once(1)
            .chain(std::iter::repeat(5).take(lm.max_len))
            .chain(std::iter::once(2))
            .collect();
        assert!(TokenBatch::new(&[long], lm.max_len).is_err());
    }

    #[test]
    fn attention_rows_are_simplices_and_ignore_padding() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1usize, 5, 6, 2], vec![1, 7, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let mut tape = Tape::new();
        let x = lm.embed(&mut tape, &store, &tb).unwrap();
        let mut trace = AttentionTrace::new();
        lm.forward_layers(&mut tape, &store, x, 0, lm.layers, &tb, Some(&mut trace))
            .unwrap();
        assert_eq!(trace.len(), lm.layers * lm.heads);
        for probs in trace {
            let t = tape.value(probs);
            for b in 0..tb.batch {
                for i in 0..tb.len {
                    let row = &t.data()[(b * tb.len + i) * tb.len..(b * tb.len + i + 1) * tb.len];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12, "row sums to {sum}");
                    for j in tb.lens[b]..tb.len {
                        assert_eq!(row[j], 0.0, "pad key {j} received probability");
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_reach_every_stack_parameter() {
        let (lm, store) = tiny();
        let seqs = vec![vec![1usize, 5, 6, 7, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let mut tape = Tape::new();
        let x = lm.embed(&mut tape, &store, &tb).unwrap();
        let z1 = lm.first_stage(&mut tape, &store, x, &tb, None).unwrap();
        let fused = lm.fuse(&mut tape, &store, z1, None, &[]).unwrap();
        let z = lm.second_stage(&mut tape, &store, fused, &tb, None).unwrap();
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss).unwrap();
        for param in store.iter() {
            let g = grads.get(param.id).unwrap_or_else(|| panic!("no grad for {}", param.name));
            assert!(g.all_finite(), "non-finite grad for {}", param.name);
            assert!(
                g.data().iter().any(|v| *v != 0.0),
                "grad identically zero for {}",
                param.name
            );
        }
    }

    #[test]
    fn forward_gradient_agrees_with_finite_differences() {
        let (lm, mut store) = tiny();
        let seqs = vec![vec![1usize, 5, 6, 2]];
        let tb = TokenBatch::new(&seqs, lm.max_len).unwrap();
        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let x = lm.embed(&mut tape, store, &tb).unwrap();
            let z1 = lm.first_stage(&mut tape, store, x, &tb, None).unwrap();
            let z = lm.second_stage(&mut tape, store, z1, &tb, None).unwrap();
            // fixed probe so the scalar depends on every output entry
            let probe = Tensor::randn(&[tb.batch * tb.len, lm.dim], 1.0, &mut rng::chacha(11));
            let pv = tape.constant(probe);
            let prod = tape.mul(z, pv).unwrap();
            let s = tape.sum_all(prod);
            tape.value(s).item()
        };
        let analytic = {
            let mut tape = Tape::new();
            let x = lm.embed(&mut tape, &store, &tb).unwrap();
            let z1 = lm.first_stage(&mut tape, &store, x, &tb, None).unwrap();
            let z = lm.second_stage(&mut tape, &store, z1, &tb, None).unwrap();
            let probe = Tensor::randn(&[tb.batch * tb.len, lm.dim], 1.0, &mut rng::chacha(11));
            let pv = tape.constant(probe);
            let prod = tape.mul(z, pv).unwrap();
            let s = tape.sum_all(prod);
            tape.backward(s).unwrap()
        };
        for name in ["lm.l00.attn.wq", "lm.l01.ffn.w2", "lm.tok_embed", "lm.l00.ln1.g"] {
            let id = store.get(name).unwrap().id;
            let ga = analytic.get(id).unwrap().clone();
            for &entry in &[0usize, 3, 7] {
                let h = 1e-6;
                let orig = store.get(name).unwrap().value.data()[entry];
                store.get_mut(name).unwrap().value.data_mut()[entry] = orig + h;
                let up = loss_of(&store);
                store.get_mut(name).unwrap().value.data_mut()[entry] = orig - h;
                let down = loss_of(&store);
                store.get_mut(name).unwrap().value.data_mut()[entry] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = ga.data()[entry];
                // floor keeps roundoff in the central difference from
                // dominating when the true derivative is near zero
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                assert!(rel <= 1e-4, "{name}[{entry}]: analytic {a} fd {fd} rel {rel}");
            }
        }
    }
}
