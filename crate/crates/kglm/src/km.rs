//! Multi-head relational graph attention over sampled neighborhoods.
//!
//! Each layer scores every sampled edge with a per-head additive attention
//! (LeakyReLU slope 0.2), normalizes scores per target node, and aggregates
//! projected messages. A message combines the source embedding with the edge
//! relation by addition; an inverse-traversal offset distinguishes head→tail
//! from tail→head edges. Heads are concatenated, passed through ELU, added to
//! the target's previous embedding, and normalized.
//!
//! Relation embeddings either come from the relation context memory (rows are
//! constants on the tape) or are zero, which makes the module blind to
//! relation identity. Edges inside a target's bucket are processed in a
//! canonical order, so the output is bitwise invariant to input edge order.
//!
//! A node with no sampled edges passes through as LayerNorm of its previous
//! embedding: the aggregate is empty, ELU(0) = 0, and the residual remains.

use std::collections::HashMap;

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Edge, Subgraph};
use crate::lm::LN_EPS;
use crate::optim::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const ATTN_SLOPE: f64 = 0.2;

/// Attention weights recorded during a forward pass. `alphas[l * heads + k]`
/// is the (edges, 1) weight column for layer l head k; `offsets[l]` delimits
/// the per-target segments of that layer's canonically ordered edges.
pub struct GatTrace {
    pub alphas: Vec<Var>,
    pub offsets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeModule {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl KnowledgeModule {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.embed_dim % cfg.gat_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide width {}",
                cfg.gat_heads, cfg.embed_dim
            )));
        }
        if cfg.gat_layers == 0 {
            return Err(Error::Config("graph attention needs at least one layer".into()));
        }
        Ok(KnowledgeModule {
            dim: cfg.embed_dim,
            heads: cfg.gat_heads,
            layers: cfg.gat_layers,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let g = ParamGroup::Knowledge;
        let dh = self.dim / self.heads;
        for l in 0..self.layers {
            let p = layer_prefix(l);
            for k in 0..self.heads {
                store.insert(&format!("{p}.h{k:02}.w"), g, Tensor::randn(&[self.dim, dh], 0.02, rng))?;
                store.insert(&format!("{p}.h{k:02}.a1"), g, Tensor::randn(&[dh, 1], 0.02, rng))?;
                store.insert(&format!("{p}.h{k:02}.a2"), g, Tensor::randn(&[dh, 1], 0.02, rng))?;
            }
            store.insert(&format!("{p}.ln.g"), g, Tensor::filled(&[1, self.dim], 1.0))?;
            store.insert(&format!("{p}.ln.b"), g, Tensor::zeros(&[1, self.dim]))?;
        }
        store.insert("km.dir_offset", g, Tensor::randn(&[2, self.dim], 0.02, rng))?;
        Ok(())
    }

    /// Runs the stack over a sampled subgraph. `e0` holds one row per support
    /// node in `sub.support()` order; `relations` supplies relation rows
    /// (entity count × is irrelevant, shape (R, F)) or None for the
    /// relation-blind mode. Returns one row per target in `sub.targets()`
    /// order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sub: &Subgraph,
        e0: Var,
        relations: Option<&Tensor>,
        mut trace: Option<&mut GatTrace>,
    ) -> Result<Var> {
        let depth = sub.hops();
        if depth != self.layers {
            return Err(Error::Graph(format!(
                "subgraph provides {depth} hops, stack has {} layers",
                self.layers
            )));
        }
        {
            let v = tape.value(e0);
            if v.rows() != sub.support().len() || v.cols() != self.dim {
                return Err(Error::Shape(format!(
                    "initial embeddings are {}x{}, support needs {}x{}",
                    v.rows(),
                    v.cols(),
                    sub.support().len(),
                    self.dim
                )));
            }
        }
        if let Some(r) = relations {
            if r.cols() != self.dim {
                return Err(Error::Shape(format!(
                    "relation rows have width {}, expected {}",
                    r.cols(),
                    self.dim
                )));
            }
        }
        let rel_const = relations.map(|r| tape.constant(r.clone()));
        let dir = store.var(tape, "km.dir_offset")?;

        let mut h = e0;
        for li in 0..depth {
            let cur = &sub.node_sets[depth - 1 - li];
            let prev = &sub.node_sets[depth - li];
            let raw = &sub.edge_sets[depth - 1 - li];
            let (edges, offsets) = bucket_edges(cur, raw)?;
            let prev_pos: HashMap<usize, usize> =
                prev.iter().enumerate().map(|(i, &v)| (v, i)).collect();

            // prefix property: cur nodes occupy the first rows of prev
            let residual_idx: Vec<usize> = (0..cur.len()).collect();
            let residual = tape.gather_rows(h, &residual_idx)?;

            let p = layer_prefix(li);
            let gln = store.var(tape, &format!("{p}.ln.g"))?;
            let bln = store.var(tape, &format!("{p}.ln.b"))?;

            if edges.is_empty() {
                if let Some(tr) = trace.as_deref_mut() {
                    for _ in 0..self.heads {
                        tr.alphas.push(tape.constant(Tensor::zeros(&[0, 1])));
                    }
                    tr.offsets.push(offsets);
                }
                h = tape.layer_norm(residual, gln, bln, LN_EPS)?;
                continue;
            }

            let src_idx: Vec<usize> = edges
                .iter()
                .map(|e| {
                    prev_pos.get(&e.source).copied().ok_or_else(|| {
                        Error::Graph(format!("edge source {} missing from hop nodes", e.source))
                    })
                })
                .collect::<Result<_>>()?;
            let tgt_idx: Vec<usize> = edges.iter().map(|e| prev_pos[&e.target]).collect();
            let dir_idx: Vec<usize> = edges.iter().map(|e| e.inverse as usize).collect();

            let src_rows = tape.gather_rows(h, &src_idx)?;
            let dir_rows = tape.gather_rows(dir, &dir_idx)?;
            let rel_part = match rel_const {
                Some(rc) => {
                    let rel_idx: Vec<usize> = edges.iter().map(|e| e.relation).collect();
                    let rel_rows = tape.gather_rows(rc, &rel_idx)?;
                    tape.add(rel_rows, dir_rows)?
                }
                None => dir_rows,
            };
            let msg_in = tape.add(src_rows, rel_part)?;

            let mut head_outs = Vec::with_capacity(self.heads);
            for k in 0..self.heads {
                let w = store.var(tape, &format!("{p}.h{k:02}.w"))?;
                let a1 = store.var(tape, &format!("{p}.h{k:02}.a1"))?;
                let a2 = store.var(tape, &format!("{p}.h{k:02}.a2"))?;
                let m = tape.matmul(msg_in, w, false, false)?;
                let q = tape.matmul(residual, w, false, false)?;
                let qa = tape.matmul(q, a1, false, false)?;
                let ma = tape.matmul(m, a2, false, false)?;
                let qa_edges = tape.gather_rows(qa, &tgt_idx)?;
                let s = tape.add(qa_edges, ma)?;
                let s = tape.leaky_relu(s, ATTN_SLOPE);
                let alpha = tape.segment_softmax(s, &offsets)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.alphas.push(alpha);
                }
                head_outs.push(tape.segment_weighted_sum(alpha, m, &offsets)?);
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.offsets.push(offsets);
            }
            let agg = tape.concat_cols(&head_outs)?;
            let agg = tape.elu(agg);
            let x = tape.add(agg, residual)?;
            h = tape.layer_norm(x, gln, bln, LN_EPS)?;
        }
        Ok(h)
    }
}

fn layer_prefix(l: usize) -> String {
    format!("km.l{l:02}")
}

/// Groups edges by target in node order and sorts each bucket by
/// (source, inverse, relation), returning the flat canonical edge list and
/// segment offsets (empty segments included).
fn bucket_edges(cur: &[usize], raw: &[Edge]) -> Result<(Vec<Edge>, Vec<usize>)> {
    let pos: HashMap<usize, usize> = cur.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut buckets: Vec<Vec<Edge>> = vec![Vec::new(); cur.len()];
    for e in raw {
        let p = pos.get(&e.target).copied().ok_or_else(|| {
            Error::Graph(format!("edge target {} missing from layer nodes", e.target))
        })?;
        buckets[p].push(*e);
    }
    let mut edges = Vec::with_capacity(raw.len());
    let mut offsets = Vec::with_capacity(cur.len() + 1);
    offsets.push(0);
    for mut b in buckets {
        b.sort_unstable_by_key(|e| (e.source, e.inverse, e.relation));
        edges.extend_from_slice(&b);
        offsets.push(edges.len());
    }
    Ok((edges, offsets))
}
