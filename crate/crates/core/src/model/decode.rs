//! Cached step-by-step decoding for inference.
//!
//! Each hypothesis keeps the self-attention keys and values of its prefix, so
//! a step costs one row per hypothesis instead of re-running the prefix.
//! Cross-attention keys and values are computed once per source example.

use ndarray::{s, Array2, Axis};

use super::{offsets, Model};
use crate::autograd::{Graph, Real};
use crate::error::{Error, Result};
use crate::knowledge::RegionTag;

#[derive(Clone)]
struct Hyp<F> {
    root: usize,
    len: usize,
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
}

/// Incremental decoder over a frozen model (dropout off).
pub struct IncrementalDecoder<'m, F: Real> {
    model: &'m Model<F>,
    /// `cross[root][layer]` = projected (keys, values) of that example's memory.
    cross: Vec<Vec<(Array2<F>, Array2<F>)>>,
    hyps: Vec<Hyp<F>>,
}

impl<'m, F: Real> IncrementalDecoder<'m, F> {
    /// Encodes a batch of examples. Initially there is one empty hypothesis
    /// per example (root `i` is hypothesis `i`).
    /// A `None` tag conditions on the whole topic set.
    pub fn new(model: &'m Model<F>, pixels: Array2<F>, tags: &[Option<RegionTag>]) -> Result<Self> {
        let mut sess = model.session(Graph::new());
        let mem = sess.memory_with(pixels, tags)?;
        let layers = model.config.decoder_layers;
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let k = sess.linear(mem.tokens, &format!("decoder.{l}.cross.k"));
            let v = sess.linear(mem.tokens, &format!("decoder.{l}.cross.v"));
            per_layer.push((k, v));
        }
        let g = &sess.g;
        let cross = (0..tags.len())
            .map(|b| {
                let rows = mem.seg[b]..mem.seg[b + 1];
                per_layer
                    .iter()
                    .map(|&(k, v)| {
                        (g.value(k).slice(s![rows.clone(), ..]).to_owned(), g.value(v).slice(s![rows.clone(), ..]).to_owned())
                    })
                    .collect()
            })
            .collect();
        let d = model.config.d;
        let empty = Array2::<F>::zeros((0, d));
        let hyps = (0..tags.len())
            .map(|root| Hyp { root, len: 0, keys: vec![empty.clone(); layers], values: vec![empty.clone(); layers] })
            .collect();
        Ok(IncrementalDecoder { model, cross, hyps })
    }

    pub fn live(&self) -> usize {
        self.hyps.len()
    }

    /// Source example of hypothesis `i`.
    pub fn root(&self, i: usize) -> usize {
        self.hyps[i].root
    }

    /// Replaces the hypothesis set: new hypothesis `i` extends old hypothesis
    /// `parents[i]` with `tokens[i]`. Returns next-token logits, one row per
    /// new hypothesis.
    pub fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Array2<F>> {
        if parents.len() != tokens.len() || parents.is_empty() {
            return Err(Error::InvalidArgument("parents and tokens must be equally long and non-empty".into()));
        }
        let cfg = &self.model.config;
        let mut uses = vec![0usize; self.hyps.len()];
        for &p in parents {
            *uses.get_mut(p).ok_or_else(|| Error::InvalidArgument(format!("no hypothesis {p}")))? += 1;
        }
        let mut old: Vec<Option<Hyp<F>>> = std::mem::take(&mut self.hyps).into_iter().map(Some).collect();
        let mut hyps = Vec::with_capacity(parents.len());
        for &p in parents {
            uses[p] -= 1;
            let h = if uses[p] == 0 { old[p].take().expect("moved once") } else { old[p].clone().expect("live") };
            hyps.push(h);
        }
        for (h, &t) in hyps.iter().zip(tokens) {
            if h.len >= cfg.max_len {
                return Err(Error::PrefixTooLong { len: h.len + 1, max_len: cfg.max_len });
            }
            if t >= cfg.vocab_size {
                return Err(Error::UnknownTokenId(t));
            }
        }

        let mut sess = self.model.session(Graph::new());
        let n = hyps.len();
        let q_seg: Vec<usize> = (0..=n).collect();
        let positions: Vec<usize> = hyps.iter().map(|h| h.len).collect();
        let (tok, pe) = (sess.param("decoder.tok"), sess.param("decoder.pos"));
        let te = sess.g.rows(tok, tokens);
        let pe = sess.g.rows(pe, &positions);
        let mut x = sess.g.add(te, pe);
        let k_seg = offsets(hyps.iter().map(|h| h.len + 1));
        let m_seg = offsets(hyps.iter().map(|h| self.cross[h.root][0].0.nrows()));
        for l in 0..cfg.decoder_layers {
            let pre = format!("decoder.{l}");
            let h = sess.norm(x, &format!("{pre}.ln1"));
            let q = sess.linear(h, &format!("{pre}.self.q"));
            let kn = sess.linear(h, &format!("{pre}.self.k"));
            let vn = sess.linear(h, &format!("{pre}.self.v"));
            for (i, hyp) in hyps.iter_mut().enumerate() {
                let kr = sess.g.value(kn).row(i).insert_axis(Axis(0)).to_owned();
                let vr = sess.g.value(vn).row(i).insert_axis(Axis(0)).to_owned();
                hyp.keys[l].append(Axis(0), kr.view()).expect("matching width");
                hyp.values[l].append(Axis(0), vr.view()).expect("matching width");
            }
            let kk = stack(hyps.iter().map(|h| &h.keys[l]));
            let vv = stack(hyps.iter().map(|h| &h.values[l]));
            let kk = sess.g.constant(kk);
            let vv = sess.g.constant(vv);
            let a = sess.g.attention(q, kk, vv, &q_seg, &k_seg, cfg.heads, false);
            let a = sess.linear(a, &format!("{pre}.self.o"));
            x = sess.g.add(x, a);

            let h = sess.norm(x, &format!("{pre}.ln2"));
            let q = sess.linear(h, &format!("{pre}.cross.q"));
            let ck = stack(hyps.iter().map(|h| &self.cross[h.root][l].0));
            let cv = stack(hyps.iter().map(|h| &self.cross[h.root][l].1));
            let ck = sess.g.constant(ck);
            let cv = sess.g.constant(cv);
            let a = sess.g.attention(q, ck, cv, &q_seg, &m_seg, cfg.heads, false);
            let a = sess.linear(a, &format!("{pre}.cross.o"));
            x = sess.g.add(x, a);

            let h = sess.norm(x, &format!("{pre}.ln3"));
            let f = sess.feed_forward(h, &pre);
            x = sess.g.add(x, f);
        }
        let x = sess.norm(x, "decoder.ln_f");
        let logits = sess.linear(x, "decoder.out");
        for h in &mut hyps {
            h.len += 1;
        }
        self.hyps = hyps;
        Ok(sess.g.value(logits).clone())
    }
}

fn stack<'a, F: Real>(mats: impl Iterator<Item = &'a Array2<F>>) -> Array2<F> {
    let views: Vec<_> = mats.map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching widths")
}
